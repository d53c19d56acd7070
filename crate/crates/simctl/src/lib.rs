//! Runnable processes around the YoMo core: meter nodes, the coordinator,
//! log replay and the appliance report.

pub mod clock;
pub mod node;
pub mod replay;
pub mod report;
pub mod transport;

pub use clock::{Clock, SimClock, SystemClock};
pub use node::{ConfigError, MeterNode, NodeConfig, NodeStats, ProfileSpec};
pub use replay::{replay, ReplayReport};
pub use report::{format_report, report_tables, ReportRow};
pub use transport::{DropLog, LossyTransport, Transport, UdpTransport};
