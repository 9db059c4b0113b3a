//! Deterministic CSV output: 9 significant digits, fixed column order,
//! mandatory header. Timestamps never enter CSV bodies.

use std::fmt::Write as _;

use routelab_core::probes::ProbeSeries;

/// Format a float with 9 significant digits; NaN renders as "nan".
pub fn fmt9(x: f64) -> String {
    if x.is_nan() {
        "nan".to_string()
    } else {
        format!("{x:.8e}")
    }
}

pub const METRICS_HEADER: &str =
    "protocol,method,routing,schedule,alpha,delta,seed,forgetting,adapt_at_k,final_avg_loss";

/// One row of the outcome-metrics schema.
#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub protocol: String,
    pub method: String,
    pub routing: String,
    pub schedule: String,
    pub alpha: f64,
    pub delta: f64,
    pub seed: u64,
    pub forgetting: f64,
    pub adapt_at_k: f64,
    pub final_avg_loss: f64,
}

impl MetricsRow {
    pub fn to_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.protocol,
            self.method,
            self.routing,
            self.schedule,
            fmt9(self.alpha),
            fmt9(self.delta),
            self.seed,
            fmt9(self.forgetting),
            fmt9(self.adapt_at_k),
            fmt9(self.final_avg_loss)
        )
    }

    /// Deterministic run id shared by metrics rows and probe files.
    pub fn run_id(&self) -> String {
        run_id(
            &self.protocol,
            &self.method,
            &self.routing,
            &self.schedule,
            self.alpha,
            self.delta,
            self.seed,
        )
    }
}

pub fn run_id(
    protocol: &str,
    method: &str,
    routing: &str,
    schedule: &str,
    alpha: f64,
    delta: f64,
    seed: u64,
) -> String {
    let sanitize = |s: &str| -> String {
        s.chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
            .collect()
    };
    format!(
        "{}__{}__{}__{}__a{:.3}__d{:.3}__s{}",
        sanitize(protocol),
        sanitize(method),
        sanitize(routing),
        sanitize(schedule),
        alpha,
        delta,
        seed
    )
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.to_line());
        out.push('\n');
    }
    out
}

pub const PROBE_HEADER: &str = "step,value,run_id,probe_name";

pub fn probe_csv(entries: &[(String, ProbeSeries)], run_id: &str) -> String {
    let mut out = String::from(PROBE_HEADER);
    out.push('\n');
    for (name, series) in entries {
        for (t, v) in series.times.iter().zip(&series.values) {
            let _ = writeln!(out, "{},{},{},{}", t, fmt9(*v), run_id, name);
        }
    }
    out
}

/// Generic plot-data CSV from a header and rows of formatted cells.
pub fn table_csv(header: &str, rows: &[Vec<String>]) -> String {
    let mut out = String::from(header);
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nine_significant_digits() {
        assert_eq!(fmt9(1.0), "1.00000000e0");
        assert_eq!(fmt9(0.123456789123), "1.23456789e-1");
        assert_eq!(fmt9(f64::NAN), "nan");
    }

    #[test]
    fn run_id_is_filesystem_safe() {
        let id = run_id("denom-intervene", "projection", "mod/scaled-raw(0.25)", "fixed", 0.5, 0.1, 3);
        assert!(!id.contains('/'));
        assert!(!id.contains('('));
        assert!(id.starts_with("denom-intervene__projection__"));
    }
}
