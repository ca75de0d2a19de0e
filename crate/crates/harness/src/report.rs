//! Writes run artifacts and renders them as text.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::Path;

use thiserror::Error;

use crate::metrics::MetricsReport;
use crate::scenario::HoldTimeModel;
use crate::sentinel_exp::{ExperimentResult, MeanStd};
use crate::sim::{RunOutput, TraceEvent};

pub const TRACE_FILE: &str = "trace.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const TABLE_FILE: &str = "tableV.txt";
pub const AIRTIME_FILE: &str = "airtime.jsonl";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub fn write_trace<W: Write>(trace: &[TraceEvent], mut out: W) -> Result<(), ReportError> {
    for event in trace {
        serde_json::to_writer(&mut out, event)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Writes the trace, summary, airtime ledger and admission table of a run.
pub fn emit_report(run: &RunOutput, dir: &Path, hold: &HoldTimeModel) -> Result<(), ReportError> {
    fs::create_dir_all(dir)?;
    let mut trace = BufWriter::new(File::create(dir.join(TRACE_FILE))?);
    write_trace(&run.trace, &mut trace)?;
    trace.flush()?;
    fs::write(dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&run.report)?)?;
    let mut airtime = BufWriter::new(File::create(dir.join(AIRTIME_FILE))?);
    run.ledger.write_jsonl(&mut airtime)?;
    airtime.flush()?;
    let t = run.report.sentinel;
    let row = SentinelRow {
        label: "This run".into(),
        rate: None,
        admitted: MeanStd { mean: t.admitted as f64, std_dev: 0.0 },
        rejected_concurrency: MeanStd { mean: t.rejected_concurrency as f64, std_dev: 0.0 },
        rejected_rate: MeanStd { mean: t.rejected_rate as f64, std_dev: 0.0 },
    };
    fs::write(dir.join(TABLE_FILE), render_sentinel_table(&[row], hold, 1))?;
    Ok(())
}

pub fn read_summary(dir: &Path) -> Result<MetricsReport, ReportError> {
    Ok(serde_json::from_str(&fs::read_to_string(dir.join(SUMMARY_FILE))?)?)
}

pub struct SentinelRow {
    pub label: String,
    pub rate: Option<f64>,
    pub admitted: MeanStd,
    pub rejected_concurrency: MeanStd,
    pub rejected_rate: MeanStd,
}

impl SentinelRow {
    pub fn from_result(label: &str, result: &ExperimentResult) -> Self {
        SentinelRow {
            label: label.into(),
            rate: Some(result.rate),
            admitted: result.admitted,
            rejected_concurrency: result.rejected_concurrency,
            rejected_rate: result.rejected_rate,
        }
    }
}

/// Label the admission table uses for an arrival rate.
pub fn rate_label(rate: f64) -> &'static str {
    if rate <= 0.05 {
        "Low"
    } else if rate < 1.0 {
        "Medium"
    } else {
        "High"
    }
}

fn cell(v: MeanStd) -> String {
    format!("{:05.2} ± {:05.2}", v.mean, v.std_dev)
}

pub fn render_sentinel_table(rows: &[SentinelRow], hold: &HoldTimeModel, runs: usize) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "# hold time ~ N({:.2}, {:.2}^2) s clipped to [{}, {}]; {} run(s) per row",
        hold.mean, hold.std_dev, hold.min, hold.max, runs
    );
    let _ = writeln!(
        out,
        "{:<10} | {:>12} | {:>15} | {:>23} | {:>24}",
        "Scenario", "Arrival Rate", "Admitted", "Rejected (Concurrency)", "Rejected (Rate Limit)"
    );
    let _ = writeln!(out, "{}", "-".repeat(96));
    for row in rows {
        let rate = row.rate.map_or_else(|| "-".to_string(), |r| format!("{r} clients/s"));
        let _ = writeln!(
            out,
            "{:<10} | {:>12} | {:>15} | {:>23} | {:>24}",
            row.label,
            rate,
            cell(row.admitted),
            cell(row.rejected_concurrency),
            cell(row.rejected_rate)
        );
    }
    out
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"))
}

/// Human-readable summary of a run.
pub fn render_summary(report: &MetricsReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "mode {:?}, seed {}", report.mode, report.seed);
    let _ = writeln!(out, "requests completed: {}/{}", report.completed, report.requests.len());
    let s = &report.mean_stages;
    let _ = writeln!(
        out,
        "mean stage delays (s): dns {} tcp {} tls {} access {}",
        opt(s.dns),
        opt(s.tcp),
        opt(s.tls),
        opt(s.access)
    );
    let shares = report.stage_share_percent;
    let _ = writeln!(
        out,
        "stage share (%): dns {:.1} tcp {:.1} tls {:.1} access {:.1}",
        shares[0], shares[1], shares[2], shares[3]
    );
    let _ = writeln!(out, "total delay (s): {:.3} ± {:.3}", report.mean_total, report.std_total);
    let _ = writeln!(
        out,
        "pdr: {:.2}% ({}/{} messages); frames {}/{} delivered, {} retransmissions",
        report.pdr_percent,
        report.packets_delivered,
        report.packets_sent,
        report.frames_delivered,
        report.frames_sent,
        report.retransmissions
    );
    let _ = writeln!(out, "throughput: {:.1} B/s", report.throughput_bytes_per_s);
    let _ = writeln!(
        out,
        "airtime: {:.3} s total; hub radio duty cycle {:.3}% over {:.1} s",
        report.airtime_total_s, report.radio_duty_cycle_percent, report.simulated_time_s
    );
    let d = report.duty_cycle;
    let _ = writeln!(
        out,
        "duty cycle estimate: {:.2}% ± {:.2}% ({:.2} s on per {:.0} s)",
        d.percent, d.spread_percent, d.on_time_s, d.period_s
    );
    let t = report.sentinel;
    let _ = writeln!(
        out,
        "sentinel: admitted {} rejected_concurrency {} rejected_rate {}",
        t.admitted, t.rejected_concurrency, t.rejected_rate
    );
    for r in report.requests.iter().filter(|r| !r.completed) {
        let _ =
            writeln!(out, "request {} on {} failed: {}", r.index, r.device, r.error.as_deref().unwrap_or("unknown"));
    }
    out
}
