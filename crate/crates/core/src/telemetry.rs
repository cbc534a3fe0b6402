//! Telemetry CSV: one row per training step plus a leading `init` row.
//!
//! Columns, in order:
//!
//! | column | meaning |
//! |---|---|
//! | `step` | global step counter, 0 for the initial evaluation |
//! | `phase` | `init`, `opd`, `opsd`, `rlvr`, `sft` or `combined` |
//! | `loss` | distillation loss, SFT NLL per token, or RL surrogate |
//! | `reward` | mean exact-match reward of the batch |
//! | `mean_len`, `max_len` | rollout lengths in tokens |
//! | `trunc_ratio` | fraction of rollouts without end-of-sequence |
//! | `skip_rate` | fraction of positions skipped for an empty support |
//! | `grad_norm` | L2 norm of the applied gradient |
//! | `rep_ratio` | repetition ratio over the batch (n-gram size from config) |
//! | `overlap` | mean TopK overlap between student and teacher |
//! | `rank_at_k` | mean teacher rank of sampled tokens (`K+1` when outside) |
//! | `delta_logprob` | mean `l_T − l_S` at sampled tokens |
//! | `entropy` | mean student entropy in nats |
//! | `entropy_corr` | Pearson correlation of `delta_logprob` and entropy |
//! | `eval_accuracy` | greedy exact match over all instances, on eval steps |
//!
//! Empty cells mean "not measured". Floats use shortest round-trip formatting.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::MetricBundle;
use crate::trainer::StepTelemetry;

pub const COLUMNS: [&str; 16] = [
    "step",
    "phase",
    "loss",
    "reward",
    "mean_len",
    "max_len",
    "trunc_ratio",
    "skip_rate",
    "grad_norm",
    "rep_ratio",
    "overlap",
    "rank_at_k",
    "delta_logprob",
    "entropy",
    "entropy_corr",
    "eval_accuracy",
];

fn cell<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn record(row: &StepTelemetry) -> [String; 16] {
    let m = &row.metrics;
    [
        row.step.to_string(),
        row.phase.clone(),
        cell(row.loss),
        cell(row.reward),
        cell(row.mean_len),
        cell(row.max_len),
        cell(row.trunc_ratio),
        cell(row.skip_rate),
        cell(row.grad_norm),
        cell(m.rep_ratio),
        cell(m.overlap),
        cell(m.rank_at_k),
        cell(m.delta_logprob),
        cell(m.entropy),
        cell(m.entropy_corr),
        cell(row.eval_accuracy),
    ]
}

pub struct TelemetryWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl TelemetryWriter<File> {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::file(path, e))?;
        Self::new(file)
    }
}

impl<W: Write> TelemetryWriter<W> {
    pub fn new(out: W) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(out);
        inner.write_record(COLUMNS).map_err(csv_error)?;
        Ok(Self { inner })
    }

    pub fn write(&mut self, row: &StepTelemetry) -> Result<()> {
        self.inner.write_record(record(row)).map_err(csv_error)
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush()?;
        self.inner
            .into_inner()
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// Serializes rows to CSV text.
pub fn to_csv(rows: &[StepTelemetry]) -> String {
    let mut w = TelemetryWriter::new(Vec::new()).expect("in-memory writer");
    for r in rows {
        w.write(r).expect("in-memory writer");
    }
    String::from_utf8(w.finish().expect("in-memory writer")).expect("utf-8 output")
}

#[derive(Debug, thiserror::Error)]
#[error("telemetry line {line}: {message}")]
pub struct ParseError {
    pub line: u64,
    pub message: String,
}

fn parse_opt<T: std::str::FromStr>(s: &str, column: &str, line: u64) -> std::result::Result<Option<T>, ParseError> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| ParseError {
        line,
        message: format!("bad `{column}` value `{s}`"),
    })
}

/// Parses telemetry written by [`TelemetryWriter`].
pub fn read_csv<R: Read>(input: R) -> std::result::Result<Vec<StepTelemetry>, ParseError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = reader.headers().map_err(|e| ParseError {
        line: 1,
        message: e.to_string(),
    })?;
    if header.iter().ne(COLUMNS) {
        return Err(ParseError {
            line: 1,
            message: format!("expected header `{}`", COLUMNS.join(",")),
        });
    }
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| ParseError {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let f = |i: usize| rec.get(i).unwrap_or("");
        let step = parse_opt::<usize>(f(0), COLUMNS[0], line)?.ok_or_else(|| ParseError {
            line,
            message: "missing step".into(),
        })?;
        if f(1).is_empty() {
            return Err(ParseError {
                line,
                message: "missing phase".into(),
            });
        }
        let g = |i: usize| parse_opt::<f64>(f(i), COLUMNS[i], line);
        rows.push(StepTelemetry {
            step,
            phase: f(1).to_string(),
            loss: g(2)?,
            reward: g(3)?,
            mean_len: g(4)?,
            max_len: parse_opt(f(5), COLUMNS[5], line)?,
            trunc_ratio: g(6)?,
            skip_rate: g(7)?,
            grad_norm: g(8)?,
            metrics: MetricBundle {
                rep_ratio: g(9)?,
                overlap: g(10)?,
                rank_at_k: g(11)?,
                delta_logprob: g(12)?,
                entropy: g(13)?,
                entropy_corr: g(14)?,
            },
            eval_accuracy: g(15)?,
        });
    }
    Ok(rows)
}

/// Mean of the first and last quarter (at least one row) of a column.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Trend {
    pub start: f64,
    pub end: f64,
}

fn trend(values: &[f64]) -> Option<Trend> {
    if values.is_empty() {
        return None;
    }
    let w = (values.len() / 4).max(1);
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    Some(Trend {
        start: mean(&values[..w]),
        end: mean(&values[values.len() - w..]),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub rows: usize,
    pub training_rows: usize,
    pub phases: Vec<String>,
    pub initial_accuracy: Option<f64>,
    pub final_accuracy: Option<f64>,
    pub final_reward: Option<f64>,
    pub mean_len: Option<Trend>,
    pub max_len: Option<usize>,
    pub rep_ratio: Option<Trend>,
    pub overlap: Option<Trend>,
}

pub fn summarize(rows: &[StepTelemetry]) -> Summary {
    let training: Vec<&StepTelemetry> = rows.iter().filter(|r| r.phase != "init").collect();
    let column = |f: fn(&StepTelemetry) -> Option<f64>| -> Vec<f64> { training.iter().filter_map(|r| f(r)).collect() };
    let mut phases: Vec<String> = Vec::new();
    for r in &training {
        if phases.last() != Some(&r.phase) {
            phases.push(r.phase.clone());
        }
    }
    Summary {
        rows: rows.len(),
        training_rows: training.len(),
        phases,
        initial_accuracy: rows.iter().find_map(|r| r.eval_accuracy),
        final_accuracy: rows.iter().rev().find_map(|r| r.eval_accuracy),
        final_reward: training.iter().rev().find_map(|r| r.reward),
        mean_len: trend(&column(|r| r.mean_len)),
        max_len: training.iter().filter_map(|r| r.max_len).max(),
        rep_ratio: trend(&column(|r| r.metrics.rep_ratio)),
        overlap: trend(&column(|r| r.metrics.overlap)),
    }
}

fn num(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.4}"))
}

fn trend_line(v: Option<Trend>) -> String {
    match v {
        None => "n/a".into(),
        Some(t) => format!("{:.4} -> {:.4} ({:+.4})", t.start, t.end, t.end - t.start),
    }
}

impl Summary {
    /// Fixed-layout plain-text table.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let phases = if self.phases.is_empty() {
            "none".to_string()
        } else {
            self.phases.join(" > ")
        };
        let mut line = |k: &str, v: String| writeln!(s, "{k:<18}{v}").unwrap();
        line("rows", self.rows.to_string());
        line("training steps", self.training_rows.to_string());
        line("phases", phases);
        line("initial accuracy", num(self.initial_accuracy));
        line("final accuracy", num(self.final_accuracy));
        line("final reward", num(self.final_reward));
        line("mean length", trend_line(self.mean_len));
        line("max length", self.max_len.map_or_else(|| "n/a".into(), |m| m.to_string()));
        line("rep ratio", trend_line(self.rep_ratio));
        line("topk overlap", trend_line(self.overlap));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows() -> Vec<StepTelemetry> {
        let mut out = vec![StepTelemetry {
            step: 0,
            phase: "init".into(),
            eval_accuracy: Some(0.0),
            ..Default::default()
        }];
        for i in 1..=8 {
            out.push(StepTelemetry {
                step: i,
                phase: "opd".into(),
                loss: Some(1.0 / i as f64),
                reward: Some(i as f64 / 8.0),
                mean_len: Some(4.0 + i as f64 * 0.1),
                max_len: Some(6 + i % 3),
                trunc_ratio: Some(0.0),
                skip_rate: Some(0.0),
                grad_norm: Some(0.1 * i as f64),
                metrics: MetricBundle {
                    rep_ratio: Some(0.05),
                    overlap: Some(0.5 + 0.05 * i as f64),
                    rank_at_k: Some(1.5),
                    delta_logprob: Some(-0.25),
                    entropy: Some(1.0),
                    entropy_corr: None,
                },
                eval_accuracy: (i % 4 == 0).then_some(i as f64 / 8.0),
            });
        }
        out
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let r = rows();
        let text = to_csv(&r);
        assert!(text.starts_with(&COLUMNS.join(",")));
        assert_eq!(read_csv(text.as_bytes()).unwrap(), r);
    }

    #[test]
    fn malformed_csv_is_rejected() {
        assert!(read_csv("a,b\n1,2\n".as_bytes()).is_err());
        let mut text = to_csv(&rows());
        text.push_str("9,opd,not-a-number,,,,,,,,,,,,,\n");
        let e = read_csv(text.as_bytes()).unwrap_err();
        assert!(e.message.contains("loss"), "{e}");
        assert_eq!(e.line, 11);
    }

    #[test]
    fn summary_of_initial_only_run() {
        let s = summarize(&rows()[..1]);
        assert_eq!(s.training_rows, 0);
        assert_eq!(s.final_accuracy, Some(0.0));
        assert!(s.render().contains("mean length       n/a"));
    }

    #[test]
    fn summary_trends() {
        let s = summarize(&rows());
        assert_eq!(s.phases, vec!["opd"]);
        assert_eq!(s.final_accuracy, Some(1.0));
        let o = s.overlap.unwrap();
        assert!((o.start - 0.575).abs() < 1e-12 && (o.end - 0.875).abs() < 1e-12);
        assert_eq!(s.max_len, Some(8));
    }
}
