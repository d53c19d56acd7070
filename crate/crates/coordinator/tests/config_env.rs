//! Own test binary: it mutates the process environment.

use clap::Parser;
use yomo_coordinator::CoordinatorConfig;

#[derive(Parser)]
struct Cli {
    #[command(flatten)]
    cfg: CoordinatorConfig,
}

#[test]
fn flags_win_over_environment() {
    std::env::set_var("YOMO_UDP_PORT", "9100");
    std::env::set_var("YOMO_HTTP_PORT", "9101");
    std::env::set_var("YOMO_LIVENESS_S", "5");
    let cli = Cli::try_parse_from(["x", "--udp-port", "9200"]).unwrap();
    assert_eq!(cli.cfg.udp_port, 9200);
    assert_eq!(cli.cfg.http_port, 9101);
    assert_eq!(cli.cfg.liveness_s, 5.0);
}
