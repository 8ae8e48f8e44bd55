//! Run traces and reports: per-step metrics, CSV serialization, summary
//! statistics.
//!
//! The trace CSV is the plot-ready artifact of a run: one row per
//! simulation step in a fixed column order, floats at 17 significant
//! digits so a re-run with the same seed reproduces the file byte for
//! byte. Header comments carry the schema revision plus the seed and step
//! so a trace can be parsed back into the exact metrics it was written
//! from.

use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

use crate::cell::CellState;

/// Trace CSV schema revision written and accepted by this build.
pub const TRACE_SCHEMA_VERSION: u64 = 1;

/// Report text schema revision.
pub const REPORT_SCHEMA_VERSION: u64 = 1;

/// Column order of the trace CSV. Changing this is a schema revision.
pub const TRACE_COLUMNS: [&str; 18] = [
    "time_s",
    "demand_w",
    "delivered_w",
    "loss_w",
    "cum_loss_j",
    "k",
    "slack_soc",
    "slack_temp",
    "soc_min",
    "soc_max",
    "soc_mean",
    "temp_min_k",
    "temp_max_k",
    "temp_mean_k",
    "soc_balanced",
    "temp_balanced",
    "solver_time_s",
    "solver_fallback",
];

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("line {line}: schema_version {got} not supported (this build reads {TRACE_SCHEMA_VERSION})")]
    SchemaVersion { line: usize, got: String },
}

/// Everything logged about one closed-loop step.
///
/// Loss is plant truth (series resistance times realized current squared,
/// summed over cells), not the optimizer's estimate. The balanced flags
/// compare every cell to the population mean at the per-cell thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub time_s: f64,
    pub demand_w: f64,
    pub delivered_w: f64,
    pub loss_w: f64,
    pub cum_loss_j: f64,
    pub k: usize,
    /// Sum of SoC-corridor slack variables at the solved first step.
    pub slack_soc: f64,
    /// Sum of temperature-corridor slack variables.
    pub slack_temp: f64,
    pub soc_min: f64,
    pub soc_max: f64,
    pub soc_mean: f64,
    pub temp_min_k: f64,
    pub temp_max_k: f64,
    pub temp_mean_k: f64,
    pub soc_balanced: bool,
    pub temp_balanced: bool,
    pub solver_time_s: f64,
    /// True when the fleet solve did not reach optimality and the step fell
    /// back to a proportional dispatch.
    pub solver_fallback: bool,
}

/// Optional per-cell state capture.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub time_s: f64,
    pub states: Vec<CellState>,
}

/// Full record of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    pub seed: u64,
    pub dt_s: f64,
    pub steps: Vec<StepMetrics>,
    pub snapshots: Vec<Snapshot>,
}

impl SimTrace {
    pub fn new(seed: u64, dt_s: f64) -> Self {
        Self {
            seed,
            dt_s,
            steps: Vec::new(),
            snapshots: Vec::new(),
        }
    }

    /// Checks the structural invariants: strictly increasing time and
    /// non-decreasing cumulative loss.
    pub fn check(&self) -> Result<(), String> {
        for (i, pair) in self.steps.windows(2).enumerate() {
            if pair[1].time_s <= pair[0].time_s {
                return Err(format!("time not increasing at step {}", i + 1));
            }
            if pair[1].cum_loss_j < pair[0].cum_loss_j {
                return Err(format!("cumulative loss decreases at step {}", i + 1));
            }
        }
        Ok(())
    }

    pub fn cumulative_loss_j(&self) -> f64 {
        self.steps.last().map_or(0.0, |s| s.cum_loss_j)
    }

    pub fn mean_k(&self) -> f64 {
        mean(self.steps.iter().map(|s| s.k as f64))
    }

    pub fn mean_solver_time_s(&self) -> f64 {
        mean(self.steps.iter().map(|s| s.solver_time_s))
    }

    pub fn max_solver_time_s(&self) -> f64 {
        self.steps
            .iter()
            .map(|s| s.solver_time_s)
            .fold(0.0, f64::max)
    }

    pub fn total_solver_time_s(&self) -> f64 {
        self.steps.iter().map(|s| s.solver_time_s).sum()
    }

    pub fn fallback_fraction(&self) -> f64 {
        if self.steps.is_empty() {
            return 0.0;
        }
        self.steps.iter().filter(|s| s.solver_fallback).count() as f64 / self.steps.len() as f64
    }

    /// First time a flag turns on and stays on for at least 95% of the
    /// remaining steps. The persistence requirement keeps a single lucky
    /// step during the transient from counting as balanced.
    pub fn settling_time_s(&self, flag: impl Fn(&StepMetrics) -> bool) -> Option<f64> {
        let flags: Vec<bool> = self.steps.iter().map(&flag).collect();
        let mut on_after = vec![0usize; flags.len() + 1];
        for i in (0..flags.len()).rev() {
            on_after[i] = on_after[i + 1] + usize::from(flags[i]);
        }
        (0..flags.len())
            .find(|&i| flags[i] && on_after[i] * 20 >= (flags.len() - i) * 19)
            .map(|i| self.steps[i].time_s)
    }

    pub fn soc_balancing_time_s(&self) -> Option<f64> {
        self.settling_time_s(|s| s.soc_balanced)
    }

    pub fn temp_balancing_time_s(&self) -> Option<f64> {
        self.settling_time_s(|s| s.temp_balanced)
    }

    /// Copy with solver wall times zeroed. Every other column is a pure
    /// function of config and seed; the clock is not. Reproducibility
    /// comparisons go through this view.
    pub fn timing_free(&self) -> SimTrace {
        let mut out = self.clone();
        for s in &mut out.steps {
            s.solver_time_s = 0.0;
        }
        out
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in it {
        sum += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Writes the trace in the fixed column order with full-precision floats.
pub fn write_trace_csv(trace: &SimTrace, mut w: impl Write) -> io::Result<()> {
    writeln!(w, "# schema_version={TRACE_SCHEMA_VERSION}")?;
    writeln!(w, "# seed={}", trace.seed)?;
    writeln!(w, "# dt_s={:.16e}", trace.dt_s)?;
    writeln!(w, "{}", TRACE_COLUMNS.join(","))?;
    for s in &trace.steps {
        writeln!(
            w,
            "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{},{},{:.16e},{}",
            s.time_s,
            s.demand_w,
            s.delivered_w,
            s.loss_w,
            s.cum_loss_j,
            s.k,
            s.slack_soc,
            s.slack_temp,
            s.soc_min,
            s.soc_max,
            s.soc_mean,
            s.temp_min_k,
            s.temp_max_k,
            s.temp_mean_k,
            u8::from(s.soc_balanced),
            u8::from(s.temp_balanced),
            s.solver_time_s,
            u8::from(s.solver_fallback),
        )?;
    }
    Ok(())
}

/// Writes the trace CSV to a file.
pub fn save_trace_csv(trace: &SimTrace, path: &Path) -> Result<(), TraceError> {
    let io_err = |source| TraceError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = std::fs::File::create(path).map_err(io_err)?;
    let mut w = io::BufWriter::new(file);
    write_trace_csv(trace, &mut w).map_err(io_err)?;
    w.flush().map_err(io_err)
}

/// Parses a trace CSV back into metrics numerically identical to the ones
/// it was written from.
pub fn parse_trace_csv(text: &str) -> Result<SimTrace, TraceError> {
    let mut trace = SimTrace::new(0, 0.0);
    let mut header_seen = false;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.trim();
        if content.is_empty() {
            continue;
        }
        if let Some(comment) = content.strip_prefix('#') {
            let comment = comment.trim();
            if let Some((key, value)) = comment.split_once('=') {
                match key.trim() {
                    "schema_version" => {
                        if value.trim().parse::<u64>() != Ok(TRACE_SCHEMA_VERSION) {
                            return Err(TraceError::SchemaVersion {
                                line,
                                got: value.trim().to_string(),
                            });
                        }
                    }
                    "seed" => {
                        trace.seed = value.trim().parse().map_err(|_| TraceError::Malformed {
                            line,
                            msg: format!("bad seed {value:?}"),
                        })?;
                    }
                    "dt_s" => {
                        trace.dt_s = value.trim().parse().map_err(|_| TraceError::Malformed {
                            line,
                            msg: format!("bad dt_s {value:?}"),
                        })?;
                    }
                    _ => {}
                }
            }
            continue;
        }
        if !header_seen {
            if content != TRACE_COLUMNS.join(",") {
                return Err(TraceError::Malformed {
                    line,
                    msg: format!("header does not match the documented schema: {content:?}"),
                });
            }
            header_seen = true;
            continue;
        }
        let fields: Vec<&str> = content.split(',').collect();
        if fields.len() != TRACE_COLUMNS.len() {
            return Err(TraceError::Malformed {
                line,
                msg: format!("expected {} columns, got {}", TRACE_COLUMNS.len(), fields.len()),
            });
        }
        let f = |idx: usize| -> Result<f64, TraceError> {
            fields[idx].parse().map_err(|_| TraceError::Malformed {
                line,
                msg: format!("{}: bad number {:?}", TRACE_COLUMNS[idx], fields[idx]),
            })
        };
        let b = |idx: usize| -> Result<bool, TraceError> {
            match fields[idx] {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(TraceError::Malformed {
                    line,
                    msg: format!("{}: bad flag {:?}", TRACE_COLUMNS[idx], other),
                }),
            }
        };
        trace.steps.push(StepMetrics {
            time_s: f(0)?,
            demand_w: f(1)?,
            delivered_w: f(2)?,
            loss_w: f(3)?,
            cum_loss_j: f(4)?,
            k: fields[5].parse().map_err(|_| TraceError::Malformed {
                line,
                msg: format!("k: bad count {:?}", fields[5]),
            })?,
            slack_soc: f(6)?,
            slack_temp: f(7)?,
            soc_min: f(8)?,
            soc_max: f(9)?,
            soc_mean: f(10)?,
            temp_min_k: f(11)?,
            temp_max_k: f(12)?,
            temp_mean_k: f(13)?,
            soc_balanced: b(14)?,
            temp_balanced: b(15)?,
            solver_time_s: f(16)?,
            solver_fallback: b(17)?,
        });
    }
    if !header_seen {
        return Err(TraceError::Malformed {
            line: text.lines().count().max(1),
            msg: "no header row".into(),
        });
    }
    Ok(trace)
}

/// Loads a trace CSV from disk.
pub fn load_trace_csv(path: &Path) -> Result<SimTrace, TraceError> {
    let text = std::fs::read_to_string(path).map_err(|source| TraceError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_trace_csv(&text)
}

/// Summary of a run against its same-seed baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub seed: u64,
    pub cum_loss_j: f64,
    pub baseline_loss_j: f64,
    /// Positive when the run beats the baseline.
    pub loss_reduction_pct: f64,
    pub soc_balancing_time_s: Option<f64>,
    pub temp_balancing_time_s: Option<f64>,
    pub mean_solver_time_s: f64,
    pub max_solver_time_s: f64,
    pub mean_k: f64,
    pub fallback_fraction: f64,
    /// Paths of emitted artifacts, as `name = path` lines in the report.
    pub artifacts: Vec<(String, String)>,
}

impl RunReport {
    /// Builds the report. Both traces must come from the same seed, or the
    /// reduction percentage would compare different cell populations.
    pub fn from_traces(run: &SimTrace, baseline: &SimTrace) -> Self {
        assert_eq!(
            run.seed, baseline.seed,
            "report requires the run and its baseline to share a seed"
        );
        let base = baseline.cumulative_loss_j();
        let reduction = if base > 0.0 {
            100.0 * (base - run.cumulative_loss_j()) / base
        } else {
            0.0
        };
        Self {
            seed: run.seed,
            cum_loss_j: run.cumulative_loss_j(),
            baseline_loss_j: base,
            loss_reduction_pct: reduction,
            soc_balancing_time_s: run.soc_balancing_time_s(),
            temp_balancing_time_s: run.temp_balancing_time_s(),
            mean_solver_time_s: run.mean_solver_time_s(),
            max_solver_time_s: run.max_solver_time_s(),
            mean_k: run.mean_k(),
            fallback_fraction: run.fallback_fraction(),
            artifacts: Vec::new(),
        }
    }
}

/// Writes the report as flat key-value text.
pub fn write_report(report: &RunReport, mut w: impl Write) -> io::Result<()> {
    writeln!(w, "schema_version = {REPORT_SCHEMA_VERSION}")?;
    writeln!(w, "seed = {}", report.seed)?;
    writeln!(w, "cum_loss_j = {:.16e}", report.cum_loss_j)?;
    writeln!(w, "baseline_loss_j = {:.16e}", report.baseline_loss_j)?;
    writeln!(w, "loss_reduction_pct = {:.16e}", report.loss_reduction_pct)?;
    let opt = |v: Option<f64>| match v {
        Some(t) => format!("{t:.16e}"),
        None => "never".into(),
    };
    writeln!(w, "soc_balancing_time_s = {}", opt(report.soc_balancing_time_s))?;
    writeln!(w, "temp_balancing_time_s = {}", opt(report.temp_balancing_time_s))?;
    writeln!(w, "mean_solver_time_s = {:.16e}", report.mean_solver_time_s)?;
    writeln!(w, "max_solver_time_s = {:.16e}", report.max_solver_time_s)?;
    writeln!(w, "mean_k = {:.16e}", report.mean_k)?;
    writeln!(w, "fallback_fraction = {:.16e}", report.fallback_fraction)?;
    for (name, path) in &report.artifacts {
        writeln!(w, "{name} = {path}")?;
    }
    Ok(())
}

/// Writes the report to a file.
pub fn save_report(report: &RunReport, path: &Path) -> Result<(), TraceError> {
    let io_err = |source| TraceError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = std::fs::File::create(path).map_err(io_err)?;
    let mut w = io::BufWriter::new(file);
    write_report(report, &mut w).map_err(io_err)?;
    w.flush().map_err(io_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(t: f64, loss: f64, cum: f64) -> StepMetrics {
        StepMetrics {
            time_s: t,
            demand_w: 100.0,
            delivered_w: 100.0,
            loss_w: loss,
            cum_loss_j: cum,
            k: 3,
            slack_soc: 1e-7,
            slack_temp: 0.0,
            soc_min: 0.70,
            soc_max: 0.75,
            soc_mean: 0.72,
            temp_min_k: 301.0,
            temp_max_k: 305.0,
            temp_mean_k: 303.0,
            soc_balanced: false,
            temp_balanced: t >= 2.0,
            solver_time_s: 0.01 * (t + 1.0),
            solver_fallback: t == 1.0,
        }
    }

    fn sample_trace() -> SimTrace {
        let mut tr = SimTrace::new(11, 1.0);
        tr.steps = vec![step(0.0, 5.0, 5.0), step(1.0, 4.0, 9.0), step(2.0, 3.0, 12.0)];
        tr
    }

    #[test]
    fn csv_round_trips_exactly() {
        let tr = sample_trace();
        let mut buf = Vec::new();
        write_trace_csv(&tr, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let back = parse_trace_csv(&text).unwrap();
        assert_eq!(back.seed, tr.seed);
        assert_eq!(back.dt_s, tr.dt_s);
        assert_eq!(back.steps, tr.steps);
    }

    #[test]
    fn header_matches_documented_schema_and_rows_count() {
        let mut buf = Vec::new();
        write_trace_csv(&sample_trace(), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines().filter(|l| !l.starts_with('#'));
        assert_eq!(lines.next().unwrap(), TRACE_COLUMNS.join(","));
        assert_eq!(lines.count(), 3);
    }

    #[test]
    fn writing_twice_is_byte_identical() {
        let (mut a, mut b) = (Vec::new(), Vec::new());
        write_trace_csv(&sample_trace(), &mut a).unwrap();
        write_trace_csv(&sample_trace(), &mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn malformed_traces_are_rejected() {
        assert!(matches!(
            parse_trace_csv("time_s,loss\n"),
            Err(TraceError::Malformed { line: 1, .. })
        ));
        assert!(matches!(
            parse_trace_csv("# schema_version=2\n"),
            Err(TraceError::SchemaVersion { line: 1, .. })
        ));
        let mut buf = Vec::new();
        write_trace_csv(&sample_trace(), &mut buf).unwrap();
        let mut text = String::from_utf8(buf).unwrap();
        text.push_str("1,2,3\n");
        assert!(matches!(
            parse_trace_csv(&text),
            Err(TraceError::Malformed { .. })
        ));
    }

    #[test]
    fn invariant_check_catches_regressions() {
        let mut tr = sample_trace();
        assert!(tr.check().is_ok());
        tr.steps[2].cum_loss_j = 1.0;
        assert!(tr.check().unwrap_err().contains("cumulative loss"));
        let mut tr = sample_trace();
        tr.steps[2].time_s = 0.5;
        assert!(tr.check().unwrap_err().contains("time"));
    }

    #[test]
    fn settling_ignores_isolated_flickers() {
        let mut tr = SimTrace::new(0, 1.0);
        // On at t=1 but off again for a long stretch; stably on from t=22.
        let pattern: Vec<bool> = (0..40)
            .map(|i| i == 1 || i >= 22)
            .collect();
        tr.steps = pattern
            .iter()
            .enumerate()
            .map(|(i, &on)| {
                let mut s = step(i as f64, 1.0, i as f64 + 1.0);
                s.soc_balanced = on;
                s
            })
            .collect();
        assert_eq!(tr.soc_balancing_time_s(), Some(22.0));
        let never = SimTrace::new(0, 1.0);
        assert_eq!(never.soc_balancing_time_s(), None);
    }

    #[test]
    fn report_computes_reduction_from_same_seed() {
        let run = sample_trace();
        let mut base = sample_trace();
        base.steps[2].cum_loss_j = 16.0;
        let mut report = RunReport::from_traces(&run, &base);
        assert_eq!(report.cum_loss_j, 12.0);
        assert_eq!(report.baseline_loss_j, 16.0);
        assert_eq!(report.loss_reduction_pct, 25.0);
        report.artifacts.push(("trace_csv".into(), "out/trace.csv".into()));
        let mut buf = Vec::new();
        write_report(&report, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("schema_version = 1\n"), "{text}");
        assert!(text.contains("loss_reduction_pct = 2.5"), "{text}");
        assert!(text.contains("trace_csv = out/trace.csv"), "{text}");
        // Times settle to "never" when balancing is not reached.
        assert!(text.contains("soc_balancing_time_s = never"), "{text}");
    }

    #[test]
    #[should_panic(expected = "share a seed")]
    fn report_rejects_mismatched_seeds() {
        let run = sample_trace();
        let mut base = sample_trace();
        base.seed = 99;
        let _ = RunReport::from_traces(&run, &base);
    }
}
