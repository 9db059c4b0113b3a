//! Result persistence and report rendering. Metric and probe CSV bodies
//! are bit-identical across reruns of the same spec; timestamps live only
//! in meta.json.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use routelab_core::error::Error;
use routelab_core::metrics::{pearson, spearman};

use crate::config::ExperimentSpec;
use crate::csvio::{metrics_csv, probe_csv, MetricsRow, METRICS_HEADER};
use crate::protocols::ProtocolOutput;

/// Write every artifact of a finished protocol into `dir`.
pub fn persist(spec: &ExperimentSpec, out: &ProtocolOutput, dir: &Path) -> Result<(), Error> {
    let io = |e: std::io::Error| Error::Config(format!("io error under {}: {e}", dir.display()));
    fs::create_dir_all(dir.join("probes")).map_err(io)?;
    fs::write(dir.join("metrics.csv"), metrics_csv(&out.rows)).map_err(io)?;
    for (run_id, entries) in &out.probe_files {
        let body = probe_csv(entries, run_id);
        fs::write(dir.join("probes").join(format!("{run_id}.csv")), body).map_err(io)?;
    }
    for (name, body) in &out.plotdata {
        fs::write(dir.join(name), body).map_err(io)?;
    }
    for (run_id, body) in &out.state_dumps {
        fs::write(dir.join("probes").join(format!("{run_id}.state.csv")), body).map_err(io)?;
    }
    let mut summary = out.summary.clone();
    if !out.failures.is_empty() {
        summary.push_str("\nfailed cells:\n");
        for (id, err) in &out.failures {
            summary.push_str(&format!("  {id}: {err}\n"));
        }
    }
    fs::write(dir.join("summary.txt"), &summary).map_err(io)?;
    let meta = serde_json::json!({
        "spec_hash": spec.spec_hash(),
        "protocol": spec.protocol.name.label(),
        "seeds": spec.run.seeds,
        "version": env!("CARGO_PKG_VERSION"),
        "created_unix": std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        "cells": out.rows.len(),
        "failures": out.failures.len(),
    });
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta).unwrap())
        .map_err(io)?;
    Ok(())
}

fn parse_metrics(path: &Path) -> Result<Vec<MetricsRow>, Error> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != METRICS_HEADER {
        return Err(Error::Config(format!("unexpected metrics header: {header}")));
    }
    let mut rows = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 10 {
            return Err(Error::Config(format!("metrics line {} malformed", ln + 2)));
        }
        let f = |s: &str| -> f64 {
            if s == "nan" {
                f64::NAN
            } else {
                s.parse().unwrap_or(f64::NAN)
            }
        };
        rows.push(MetricsRow {
            protocol: parts[0].into(),
            method: parts[1].into(),
            routing: parts[2].into(),
            schedule: parts[3].into(),
            alpha: f(parts[4]),
            delta: f(parts[5]),
            seed: parts[6].parse().unwrap_or(0),
            forgetting: f(parts[7]),
            adapt_at_k: f(parts[8]),
            final_avg_loss: f(parts[9]),
        });
    }
    Ok(rows)
}

/// Steady-state mean of the post-switch tail of a probe file's series.
fn probe_steady(path: &Path, probe: &str) -> Option<f64> {
    let text = fs::read_to_string(path).ok()?;
    let mut pts: Vec<(u64, f64)> = Vec::new();
    for line in text.lines().skip(1) {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() == 4 && parts[3] == probe {
            if let (Ok(t), Ok(v)) = (parts[0].parse::<u64>(), parts[1].parse::<f64>()) {
                pts.push((t, v));
            }
        }
    }
    if pts.len() < 2 {
        return None;
    }
    let (first, last) = (pts[0].0, pts.last().unwrap().0);
    let win = routelab_core::probes::steady_window(first, last);
    let sel: Vec<f64> = pts
        .iter()
        .filter(|(t, _)| *t >= win.0 && *t <= win.1)
        .map(|(_, v)| *v)
        .collect();
    if sel.is_empty() {
        None
    } else {
        Some(sel.iter().sum::<f64>() / sel.len() as f64)
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

fn std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Render a summary from a completed result directory: per-cell mean +- std
/// over seeds, plus correlation statistics between steady R_eta and
/// forgetting where probe series exist.
pub fn render(dir: &Path) -> Result<String, Error> {
    let rows = parse_metrics(&dir.join("metrics.csv"))?;
    if rows.is_empty() {
        return Err(Error::Config("result directory holds no metrics rows".into()));
    }
    let mut groups: BTreeMap<(String, String, String, String, String), Vec<&MetricsRow>> =
        BTreeMap::new();
    for row in &rows {
        groups
            .entry((
                row.protocol.clone(),
                row.method.clone(),
                row.routing.clone(),
                row.schedule.clone(),
                format!("{:.3}|{:.3}", row.alpha, row.delta),
            ))
            .or_default()
            .push(row);
    }
    let mut out = format!("report: {}\n", dir.display());
    out.push_str(&format!(
        "{:<28} {:<22} {:<10} {:>7} {:>7} {:>24} {:>24}\n",
        "method", "routing", "schedule", "alpha", "delta", "forgetting", "adapt_at_k"
    ));
    for ((_, method, routing, schedule, _), sel) in &groups {
        let f: Vec<f64> = sel.iter().map(|r| r.forgetting).filter(|x| x.is_finite()).collect();
        let a: Vec<f64> = sel.iter().map(|r| r.adapt_at_k).filter(|x| x.is_finite()).collect();
        let fmt_ms = |xs: &[f64]| {
            if xs.is_empty() {
                "nan".to_string()
            } else if xs.len() > 1 {
                format!("{:.6} ± {:.6}", mean(xs), std(xs))
            } else {
                format!("{:.6}", mean(xs))
            }
        };
        out.push_str(&format!(
            "{:<28} {:<22} {:<10} {:>7.3} {:>7.3} {:>24} {:>24}\n",
            method,
            routing,
            schedule,
            sel[0].alpha,
            sel[0].delta,
            fmt_ms(&f),
            fmt_ms(&a)
        ));
    }

    // Correlations between steady R_eta and forgetting across cells that
    // carry an r_eta probe, per seed then averaged.
    let probes_dir = dir.join("probes");
    if probes_dir.is_dir() {
        let mut per_seed: BTreeMap<u64, Vec<(f64, f64)>> = BTreeMap::new();
        for row in &rows {
            if !row.forgetting.is_finite() {
                continue;
            }
            let path = probes_dir.join(format!("{}.csv", row.run_id()));
            if let Some(ratio) = probe_steady(&path, "r_eta") {
                per_seed.entry(row.seed).or_default().push((ratio, row.forgetting));
            }
        }
        let mut spearmans = Vec::new();
        let mut pearsons = Vec::new();
        for pts in per_seed.values() {
            if pts.len() >= 3 {
                let r: Vec<f64> = pts.iter().map(|(x, _)| *x).collect();
                let f: Vec<f64> = pts.iter().map(|(_, y)| *y).collect();
                spearmans.push(spearman(&r, &f));
                pearsons.push(pearson(&r, &f));
            }
        }
        if !spearmans.is_empty() {
            out.push_str(&format!(
                "R_eta vs forgetting: Spearman per-seed mean {:.4}, Pearson per-seed mean {:.4} ({} seeds, {} cells/seed)\n",
                mean(&spearmans),
                mean(&pearsons),
                spearmans.len(),
                per_seed.values().next().map(|v| v.len()).unwrap_or(0),
            ));
        }
    }
    Ok(out)
}
