//! Measured-versus-configured power table for the appliance fixtures.

use std::fmt::Write;

use yomo_core::fixtures::ApplianceFixture;
use yomo_core::{MeterConfig, MeterId, MeterState, PowerReading};

/// Sampling frequency and window the table is produced at.
pub const REPORT_FS: f64 = 1000.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub name: String,
    pub p_configured: f64,
    pub s_configured: f64,
    /// Reactive power implied by the configured P and S.
    pub q_derived: f64,
    /// Published reactive power, when the fixture carries one.
    pub q_reference: Option<f64>,
    pub reading: PowerReading,
}

fn pct(measured: f64, reference: f64) -> f64 {
    if reference == 0.0 {
        if measured == 0.0 { 0.0 } else { f64::INFINITY }
    } else {
        100.0 * (measured - reference) / reference
    }
}

impl ReportRow {
    pub fn p_error_pct(&self) -> f64 {
        pct(self.reading.triplet.active_p, self.p_configured)
    }

    pub fn s_error_pct(&self) -> f64 {
        pct(self.reading.triplet.apparent_s, self.s_configured)
    }

    pub fn q_error_pct(&self) -> f64 {
        pct(self.reading.triplet.reactive_q, self.q_derived)
    }

    /// True when the published Q disagrees with the configured P and S by
    /// more than the 1 % reactive-power tolerance.
    pub fn reference_inconsistent(&self) -> bool {
        self.q_reference
            .is_some_and(|q| pct(q, self.q_derived).abs() > 1.0)
    }
}

/// Runs each fixture through a meter at [`REPORT_FS`] and takes its first
/// reading.
pub fn report_tables(fixtures: &[ApplianceFixture], seed: u64) -> Result<Vec<ReportRow>, yomo_core::Error> {
    fixtures
        .iter()
        .enumerate()
        .map(|(k, f)| {
            let mut meter = MeterState::new(
                MeterId::from_u64(k as u64),
                f.profile.clone(),
                REPORT_FS,
                MeterConfig { seed, ..MeterConfig::default() },
            )?;
            meter.tick(0.0);
            let reading = meter
                .tick(meter.measurement_period())
                .expect("a full window has elapsed");
            Ok(ReportRow {
                name: f.profile.name.clone(),
                p_configured: f.profile.p_active,
                s_configured: f.profile.s_apparent,
                q_derived: f.profile.q_reactive(),
                q_reference: f.q_reference,
                reading,
            })
        })
        .collect()
}

pub fn format_report(rows: &[ReportRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Active power [W]");
    let _ = writeln!(out, "{:<16} {:>10} {:>10} {:>8}", "appliance", "measured", "real", "error");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<16} {:>10.2} {:>10.2} {:>7.3}%",
            r.name, r.reading.triplet.active_p, r.p_configured, r.p_error_pct()
        );
    }
    let _ = writeln!(out, "\nApparent power [VA]");
    let _ = writeln!(out, "{:<16} {:>10} {:>10} {:>8}", "appliance", "measured", "real", "error");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<16} {:>10.2} {:>10.2} {:>7.3}%",
            r.name, r.reading.triplet.apparent_s, r.s_configured, r.s_error_pct()
        );
    }
    let _ = writeln!(out, "\nReactive power [var]");
    let _ = writeln!(
        out,
        "{:<16} {:>10} {:>10} {:>8} {:>10}",
        "appliance", "measured", "sqrt(S2-P2)", "error", "published"
    );
    let mut notes = Vec::new();
    for r in rows {
        let published = r.q_reference.map_or("-".to_string(), |q| format!("{q:.2}"));
        let flag = if r.reference_inconsistent() { " !" } else { "" };
        let _ = writeln!(
            out,
            "{:<16} {:>10.2} {:>10.2} {:>7.3}% {:>10}{flag}",
            r.name, r.reading.triplet.reactive_q, r.q_derived, r.q_error_pct(), published
        );
        if let (true, Some(q)) = (r.reference_inconsistent(), r.q_reference) {
            notes.push(format!(
                "! {}: published Q {q} var is inconsistent with P {} W and S {} VA, which imply {:.2} var",
                r.name, r.p_configured, r.s_configured, r.q_derived
            ));
        }
    }
    for n in notes {
        let _ = writeln!(out, "{n}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use yomo_core::fixtures::builtin_fixtures;

    #[test]
    fn ventilator_reference_is_flagged() {
        let rows = report_tables(&builtin_fixtures(), 0).unwrap();
        assert_eq!(rows.len(), 5);
        let flagged: Vec<&str> = rows
            .iter()
            .filter(|r| r.reference_inconsistent())
            .map(|r| r.name.as_str())
            .collect();
        assert_eq!(flagged, ["ventilator"]);
        let text = format_report(&rows);
        assert!(text.contains("ventilator: published Q 36 var"), "{text}");
        assert!(text.contains("imply 34.39 var"), "{text}");
    }

    #[test]
    fn percentage_edge_cases() {
        assert_eq!(pct(0.0, 0.0), 0.0);
        assert!(pct(1.0, 0.0).is_infinite());
        assert!((pct(101.0, 100.0) - 1.0).abs() < 1e-12);
    }
}
