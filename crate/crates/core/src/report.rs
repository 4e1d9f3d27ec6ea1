//! Final-window summaries and two-run comparisons.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::fedsim::RoundMetrics;

/// Metrics averaged in a comparison, in report order.
pub const COMPARED: [&str; 5] = ["u_E", "u_C", "u_T", "u_M", "val_loss"];

fn value(m: &RoundMetrics, name: &str) -> f64 {
    match name {
        "u_E" => m.usage.energy,
        "u_C" => m.usage.comm_mb,
        "u_M" => m.usage.memory,
        "u_T" => m.usage.temperature,
        "r_E" => m.ratios[0],
        "r_C" => m.ratios[1],
        "r_M" => m.ratios[2],
        "r_T" => m.ratios[3],
        "val_loss" => m.val_loss,
        "val_acc" => m.val_acc,
        "lambda_E" => m.duals.lambda_e,
        "lambda_C" => m.duals.lambda_c,
        "lambda_M" => m.duals.lambda_m,
        "lambda_T" => m.duals.lambda_t,
        "wire_bytes" => m.wire_bytes as f64,
        _ => unreachable!("unknown series {name}"),
    }
}

/// Mean of `name` over the last `window` rounds.
pub fn final_mean(trace: &[RoundMetrics], name: &str, window: usize) -> Result<f64> {
    check_window(trace.len(), window)?;
    let tail = &trace[trace.len() - window..];
    Ok(tail.iter().map(|m| value(m, name)).sum::<f64>() / window as f64)
}

fn check_window(rows: usize, window: usize) -> Result<()> {
    if window == 0 {
        return Err(Error::Config("window must be at least 1".into()));
    }
    if window > rows {
        return Err(Error::Config(format!(
            "window of {window} rounds exceeds the {rows} rounds available"
        )));
    }
    Ok(())
}

/// Relative change from `a` to `b` as a whole percentage with an arrow:
/// `"95% ↓"` when `b` is lower, `"12% ↑"` when higher, `"0%"` when equal.
pub fn format_change(a: f64, b: f64) -> String {
    if a == b {
        return "0%".into();
    }
    if a == 0.0 {
        return "n/a".into();
    }
    let pct = ((a - b) / a * 100.0).abs().round();
    if pct == 0.0 {
        "0%".into()
    } else if b < a {
        format!("{pct}% ↓")
    } else {
        format!("{pct}% ↑")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub metric: &'static str,
    pub a: f64,
    pub b: f64,
    pub change: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub window: usize,
    pub rows: Vec<ComparisonRow>,
}

/// Final-window means of each usage column and `val_loss` for both runs,
/// with the change of B relative to A.
pub fn compare(a: &[RoundMetrics], b: &[RoundMetrics], window: usize) -> Result<Comparison> {
    check_window(a.len(), window)?;
    check_window(b.len(), window)?;
    let rows = COMPARED
        .iter()
        .map(|&metric| {
            let ma = final_mean(a, metric, window)?;
            let mb = final_mean(b, metric, window)?;
            Ok(ComparisonRow {
                metric,
                a: ma,
                b: mb,
                change: format_change(ma, mb),
            })
        })
        .collect::<Result<_>>()?;
    Ok(Comparison { window, rows })
}

impl Comparison {
    pub fn render(&self, label_a: &str, label_b: &str) -> String {
        let mut out = format!(
            "final {} rounds\n{:<10} {:>14} {:>14} {:>10}\n",
            self.window, "metric", label_a, label_b, "change"
        );
        for r in &self.rows {
            let _ = writeln!(out, "{:<10} {:>14.6} {:>14.6} {:>10}", r.metric, r.a, r.b, r.change);
        }
        out
    }
}

const PLOT_SERIES: [&str; 14] = [
    "val_loss", "val_acc", "u_E", "u_C", "u_M", "u_T", "r_E", "r_C", "r_M", "r_T", "lambda_E",
    "lambda_C", "lambda_M", "lambda_T",
];

/// Long-format `round,series,value` rows for both runs; series names are
/// prefixed with the run label, e.g. `cafl.u_C`.
pub fn write_plot_csv(
    path: impl AsRef<Path>,
    runs: &[(&str, &[RoundMetrics])],
) -> Result<()> {
    let path = path.as_ref();
    let err = |e: csv::Error| Error::Metrics {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(["round", "series", "value"]).map_err(err)?;
    for (label, trace) in runs {
        for name in PLOT_SERIES {
            for m in trace.iter() {
                w.write_record([
                    m.round.to_string(),
                    format!("{label}.{name}"),
                    value(m, name).to_string(),
                ])
                .map_err(err)?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub mode: String,
    pub seed: u64,
    pub rounds: usize,
    pub window: usize,
    pub budgets: [Option<f64>; 4],
    pub final_usage: [f64; 4],
    pub final_ratios: [f64; 4],
    pub final_val_loss: f64,
    pub final_val_acc: f64,
    pub total_wire_bytes: usize,
}

/// End-of-run summary over the last `min(window, rounds)` rounds. Infinite
/// budgets serialise as `null`.
pub fn summarize(cfg: &ExperimentConfig, trace: &[RoundMetrics], window: usize) -> RunSummary {
    let window = window.min(trace.len());
    let mean = |name: &str| {
        if window == 0 {
            0.0
        } else {
            final_mean(trace, name, window).expect("window checked")
        }
    };
    RunSummary {
        mode: cfg.mode.to_string(),
        seed: cfg.seed,
        rounds: trace.len(),
        window,
        budgets: cfg.budgets.as_array().map(|b| b.is_finite().then_some(b)),
        final_usage: ["u_E", "u_C", "u_M", "u_T"].map(mean),
        final_ratios: ["r_E", "r_C", "r_M", "r_T"].map(mean),
        final_val_loss: mean("val_loss"),
        final_val_acc: mean("val_acc"),
        total_wire_bytes: trace.iter().map(|m| m.wire_bytes).sum(),
    }
}

pub fn write_summary(path: impl AsRef<Path>, summary: &RunSummary) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(summary).expect("summary serialises");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
