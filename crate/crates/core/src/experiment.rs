//! Running configured experiments and sweeps, and writing their outputs.
//!
//! Independent runs are farmed out with rayon when the `parallel` feature
//! is on; otherwise they run one after another. Each run owns its engine,
//! so both paths produce identical results.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::config::{ExperimentConfig, SweepSpec};
use crate::engine::log::{parse_event_log, write_event_log, Record};
use crate::engine::{run, run_logged};
use crate::error::{Error, Result};
use crate::gpu::PhaseKind;
use crate::metrics::{self, phase_windowed, MetricsReport};

pub const REQUESTS_HEADER: &str = "id,arrival_s,ttft_s,e2e_s,tbt_mean_s";
pub const TIMESERIES_HEADER: &str = "time_s,instance,kv_pct,compute_pct,mem_pct";

/// Runs a config in memory. The event log is returned when enabled.
pub fn simulate(cfg: &ExperimentConfig) -> Result<(MetricsReport, Option<Vec<Record>>)> {
    cfg.validate()?;
    let requests = cfg.requests()?;
    if cfg.emit_event_log {
        run_logged(&requests, &cfg.setup()).map(|(r, log)| (r, Some(log)))
    } else {
        run(&requests, &cfg.setup()).map(|r| (r, None))
    }
}

/// Runs a config and writes its outputs under the resolved output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<(MetricsReport, PathBuf)> {
    cfg.validate()?;
    let dir = cfg.resolved_output_dir()?;
    let (report, log) = simulate(cfg)?;
    write_outputs(&dir, &report, log.as_deref())?;
    Ok((report, dir))
}

/// `makespan_s=…, tokens_per_s=…, mean_ttft_s=…`
pub fn summary_line(r: &MetricsReport) -> String {
    format!(
        "makespan_s={:.6}, tokens_per_s={:.3}, mean_ttft_s={:.6}",
        r.makespan_s, r.tokens_per_s, r.mean_ttft_s
    )
}

pub fn write_outputs(dir: &Path, report: &MetricsReport, log: Option<&[Record]>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_atomic(&dir.join("report.json"), report_json(report).as_bytes())?;
    write_atomic(&dir.join("requests.csv"), requests_csv(report).as_bytes())?;
    write_atomic(&dir.join("timeseries.csv"), timeseries_csv(report).as_bytes())?;
    if let Some(log) = log {
        write_atomic(&dir.join("events.csv"), write_event_log(log).as_bytes())?;
    }
    Ok(())
}

pub fn report_json(report: &MetricsReport) -> String {
    serde_json::to_string_pretty(report).expect("report serializes")
}

/// Writes to a sibling temp file, then renames over the target.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn requests_csv(r: &MetricsReport) -> String {
    let mut s = String::from(REQUESTS_HEADER);
    s.push('\n');
    for q in &r.requests {
        let tbt = q.tbt_mean_s().map(|v| format!("{v:?}")).unwrap_or_default();
        let _ = writeln!(s, "{},{:?},{:?},{:?},{}", q.id, q.arrival_s, q.ttft_s(), q.e2e_s(), tbt);
    }
    s
}

/// Per-instance KV and utilization, one row per change point.
pub fn timeseries_csv(r: &MetricsReport) -> String {
    let mut s = String::from(TIMESERIES_HEADER);
    s.push('\n');
    for inst in &r.instances {
        let kv: Vec<(f64, f64)> = inst.kv_series.iter().map(|p| (p.time_s, p.pct)).collect();
        let c: Vec<(f64, f64)> = inst.util_series.iter().map(|p| (p.time_s, p.compute_pct)).collect();
        let m: Vec<(f64, f64)> = inst.util_series.iter().map(|p| (p.time_s, p.mem_pct)).collect();
        let mut times: Vec<f64> = kv.iter().chain(&c).map(|p| p.0).collect();
        times.sort_by(f64::total_cmp);
        times.dedup();
        for t in times {
            let _ = writeln!(
                s,
                "{t:?},{},{:?},{:?},{:?}",
                inst.id,
                metrics::value_at(&kv, t),
                metrics::value_at(&c, t),
                metrics::value_at(&m, t)
            );
        }
    }
    s
}

/// Rebuilds a report from an `events.csv` file.
pub fn replay_file(path: &Path) -> Result<MetricsReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    metrics::replay(&parse_event_log(&text)?)
}

/// Applies `f` to every item, in parallel when the `parallel` feature is
/// on. `jobs == 0` means one worker per core. Output order matches input.
#[cfg(feature = "parallel")]
pub fn par_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    use rayon::prelude::*;
    match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
        Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
        Err(_) => seq_map(items, f),
    }
}

#[cfg(not(feature = "parallel"))]
pub fn par_map<T: Sync, R: Send>(items: &[T], _jobs: usize, f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    seq_map(items, f)
}

pub fn seq_map<T, R>(items: &[T], f: impl Fn(&T) -> R) -> Vec<R> {
    items.iter().map(f).collect()
}

/// Runs independent configs, returning reports in input order.
pub fn run_batch(cfgs: &[ExperimentConfig], jobs: usize) -> Vec<Result<MetricsReport>> {
    par_map(cfgs, jobs, |c| simulate(c).map(|(r, _)| r))
}

/// Headline metrics of one run, as written to `sweep.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub makespan_s: f64,
    pub tokens_per_s: f64,
    pub requests_per_s: f64,
    pub steady_tokens_per_s: Option<f64>,
    pub mean_ttft_s: f64,
    pub mean_tbt_s: Option<f64>,
    pub e2e_mean_s: f64,
    pub e2e_p99_s: f64,
    pub mean_batch_elapsed_s: f64,
    pub prompt_elapsed_s: f64,
    pub token_elapsed_s: f64,
}

pub const SUMMARY_COLUMNS: &str = "makespan_s,tokens_per_s,requests_per_s,steady_tokens_per_s,mean_ttft_s,mean_tbt_s,e2e_mean_s,e2e_p99_s,mean_batch_elapsed_s,prompt_elapsed_s,token_elapsed_s";

impl Summary {
    pub fn of(r: &MetricsReport) -> Self {
        let busy: Vec<f64> = r
            .instances
            .iter()
            .filter(|i| i.n_requests > 0)
            .map(|i| i.batch_elapsed_s)
            .collect();
        Summary {
            makespan_s: r.makespan_s,
            tokens_per_s: r.tokens_per_s,
            requests_per_s: r.requests_per_s,
            steady_tokens_per_s: r.steady_tokens_per_s,
            mean_ttft_s: r.mean_ttft_s,
            mean_tbt_s: r.mean_tbt_s,
            e2e_mean_s: r.e2e_s.mean,
            e2e_p99_s: r.e2e_s.p99,
            mean_batch_elapsed_s: if busy.is_empty() {
                0.0
            } else {
                busy.iter().sum::<f64>() / busy.len() as f64
            },
            prompt_elapsed_s: phase_windowed(r, PhaseKind::Prompt).elapsed_s,
            token_elapsed_s: phase_windowed(r, PhaseKind::TokenStep).elapsed_s,
        }
    }

    pub fn csv_fields(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        format!(
            "{:?},{:?},{:?},{},{:?},{},{:?},{:?},{:?},{:?},{:?}",
            self.makespan_s,
            self.tokens_per_s,
            self.requests_per_s,
            opt(self.steady_tokens_per_s),
            self.mean_ttft_s,
            opt(self.mean_tbt_s),
            self.e2e_mean_s,
            self.e2e_p99_s,
            self.mean_batch_elapsed_s,
            self.prompt_elapsed_s,
            self.token_elapsed_s
        )
    }
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub variant: String,
    pub value: Value,
    pub dir: PathBuf,
    /// On failure: exit code and message.
    pub outcome: Result<Summary, (i32, String)>,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub csv_path: PathBuf,
}

impl SweepOutcome {
    /// Exit code of the first failed row, if any.
    pub fn failure_code(&self) -> Option<i32> {
        self.rows.iter().find_map(|r| r.outcome.as_ref().err().map(|e| e.0))
    }
}

fn value_label(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn path_safe(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "._-=".contains(c) { c } else { '_' })
        .collect()
}

fn csv_quote(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Runs every sweep point under `out_dir` and writes `sweep.csv`.
///
/// Failed points do not stop the sweep; they are marked in their row.
pub fn run_sweep(spec: &SweepSpec, out_dir: &Path, jobs: usize) -> Result<SweepOutcome> {
    spec.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let points = spec.points();
    let named = !spec.variants.is_empty();
    let rows = par_map(&points, jobs, |pt| {
        let leaf = path_safe(&format!("{}={}", spec.axis, value_label(&pt.value)));
        let dir = if named {
            out_dir.join(path_safe(&pt.variant)).join(leaf)
        } else {
            out_dir.join(leaf)
        };
        let outcome = match &pt.config {
            Err(msg) => Err((2, msg.clone())),
            Ok(cfg) => simulate(cfg)
                .and_then(|(report, log)| {
                    write_outputs(&dir, &report, log.as_deref())?;
                    Ok(Summary::of(&report))
                })
                .map_err(|e| (e.exit_code(), e.to_string())),
        };
        SweepRow {
            variant: pt.variant.clone(),
            value: pt.value.clone(),
            dir,
            outcome,
        }
    });

    let mut csv = format!("variant,{},status,{SUMMARY_COLUMNS},error\n", csv_quote(&spec.axis));
    let empty_cols = ",".repeat(SUMMARY_COLUMNS.matches(',').count());
    for row in &rows {
        let _ = write!(csv, "{},{},", csv_quote(&row.variant), csv_quote(&value_label(&row.value)));
        match &row.outcome {
            Ok(s) => {
                let _ = writeln!(csv, "ok,{},", s.csv_fields());
            }
            Err((_, msg)) => {
                let _ = writeln!(csv, "failed,{empty_cols},{}", csv_quote(msg));
            }
        }
    }
    let csv_path = out_dir.join("sweep.csv");
    write_atomic(&csv_path, csv.as_bytes())?;
    Ok(SweepOutcome { rows, csv_path })
}
