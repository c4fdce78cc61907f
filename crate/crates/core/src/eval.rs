//! Dataset ingestion, overlap-aware scoring, and the moving-average
//! baseline detector.
//!
//! Scoring follows the partial-credit convention: a ground-truth
//! interval counts as detected when any predicted interval overlaps it
//! by at least one point; a predicted interval overlapping no truth
//! interval is a false positive.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::Signal;
use crate::detector::{
    compute_error, mask_to_intervals, sliding_threshold, DetectorConfig, DetectorRun,
    DetectorTrace, ErrorSignal,
};
use crate::pipeline::{intervals_to_timestamps, AnomalyInterval, Detection, RunMetadata};
use crate::scalar::Real;

/// Errors from dataset files and score inputs.
#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error("signal shorter than the moving-average window ({len} <= {window})")]
    SignalTooShort { len: usize, window: usize },
    #[error("ground truth interval ({start}, {end}) outside signal range")]
    TruthOutOfRange { start: i64, end: i64 },
    #[error("ground truth intervals overlap or are unsorted at position {0}")]
    TruthUnsorted(usize),
}

/// Counts from comparing predicted intervals against ground truth.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn add(&mut self, other: Confusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

/// Precision, recall and F1 derived from a confusion count.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Scores for one signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalScore {
    pub signal_id: String,
    #[serde(flatten)]
    pub confusion: Confusion,
    #[serde(flatten)]
    pub prf: Prf,
}

/// Per-signal rows plus the micro-averaged aggregate (summed counts).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub per_signal: Vec<SignalScore>,
    pub total: Confusion,
    #[serde(flatten)]
    pub aggregate: Prf,
}

/// A named collection of signals with ground truth.
#[derive(Debug, Clone)]
pub struct Dataset<F: Real = f64> {
    pub name: String,
    pub signals: Vec<(String, Signal<F>)>,
    pub ground_truth: BTreeMap<String, Vec<AnomalyInterval>>,
}

impl<F: Real> Dataset<F> {
    /// Check the type invariants: truth intervals sorted, disjoint, and
    /// inside their signal's timestamp range.
    pub fn validate(&self) -> Result<(), EvalError> {
        for (id, signal) in &self.signals {
            let Some(truth) = self.ground_truth.get(id) else {
                continue;
            };
            let t_min = *signal.timestamps().first().unwrap();
            let t_max = *signal.timestamps().last().unwrap();
            for (i, interval) in truth.iter().enumerate() {
                if interval.start < t_min || interval.end > t_max || interval.start > interval.end
                {
                    return Err(EvalError::TruthOutOfRange {
                        start: interval.start,
                        end: interval.end,
                    });
                }
                if i > 0 && interval.start <= truth[i - 1].end {
                    return Err(EvalError::TruthUnsorted(i));
                }
            }
        }
        Ok(())
    }
}

/// Count overlap-aware true/false positives and false negatives.
///
/// Partial and full overlaps both count: a truth interval touched by at
/// least one predicted interval is a true positive; each predicted
/// interval overlapping no truth interval is a false positive.
pub fn overlap_confusion(predicted: &[AnomalyInterval], truth: &[AnomalyInterval]) -> Confusion {
    let tp = truth
        .iter()
        .filter(|t| predicted.iter().any(|p| p.overlaps(t)))
        .count();
    let fp = predicted
        .iter()
        .filter(|p| !truth.iter().any(|t| t.overlaps(p)))
        .count();
    Confusion {
        tp,
        fp,
        fn_: truth.len() - tp,
    }
}

/// Precision, recall and F1 with zero-denominator cases scored as 0.
pub fn f1_score(confusion: Confusion) -> Prf {
    let Confusion { tp, fp, fn_ } = confusion;
    let precision = if tp + fp > 0 {
        tp as f64 / (tp + fp) as f64
    } else {
        0.0
    };
    let recall = if tp + fn_ > 0 {
        tp as f64 / (tp + fn_) as f64
    } else {
        0.0
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Prf {
        precision,
        recall,
        f1,
    }
}

/// Micro-average per-signal confusions: counts are summed before the
/// aggregate precision/recall/F1 are computed.
pub fn aggregate_report(per_signal: Vec<(String, Confusion)>) -> ScoreReport {
    let mut total = Confusion::default();
    let rows = per_signal
        .into_iter()
        .map(|(signal_id, confusion)| {
            total.add(confusion);
            SignalScore {
                signal_id,
                confusion,
                prf: f1_score(confusion),
            }
        })
        .collect();
    ScoreReport {
        per_signal: rows,
        total,
        aggregate: f1_score(total),
    }
}

impl ScoreReport {
    /// Aligned-column text rendering, one row per signal plus a total.
    pub fn to_table(&self) -> String {
        let mut width = "signal".len();
        for row in &self.per_signal {
            width = width.max(row.signal_id.len());
        }
        width = width.max("total".len());
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:>5} {:>5} {:>5}  {:>9} {:>9} {:>9}",
            "signal", "tp", "fp", "fn", "precision", "recall", "f1"
        );
        for row in &self.per_signal {
            let _ = writeln!(
                out,
                "{:<width$}  {:>5} {:>5} {:>5}  {:>9.4} {:>9.4} {:>9.4}",
                row.signal_id,
                row.confusion.tp,
                row.confusion.fp,
                row.confusion.fn_,
                row.prf.precision,
                row.prf.recall,
                row.prf.f1
            );
        }
        let _ = writeln!(
            out,
            "{:<width$}  {:>5} {:>5} {:>5}  {:>9.4} {:>9.4} {:>9.4}",
            "total",
            self.total.tp,
            self.total.fp,
            self.total.fn_,
            self.aggregate.precision,
            self.aggregate.recall,
            self.aggregate.f1
        );
        out
    }
}

// ============================================================================
// Moving-average baseline
// ============================================================================

/// Causal moving-average forecaster: each value is predicted as the mean
/// of the previous `ma_window` values, then residuals reuse the detector
/// post-processing unchanged.
pub fn moving_average_detect<F: Real>(
    signal: &Signal<F>,
    ma_window: usize,
    config: &DetectorConfig,
) -> Result<DetectorRun<F>, EvalError> {
    let len = signal.len();
    if ma_window == 0 || len <= ma_window {
        return Err(EvalError::SignalTooShort {
            len,
            window: ma_window,
        });
    }
    let values = signal.values();
    let window_f = F::from_usize(ma_window).unwrap();
    let mut predicted = Vec::with_capacity(len - ma_window);
    let mut rolling = values[..ma_window]
        .iter()
        .fold(F::zero(), |acc, &v| acc + v);
    for t in ma_window..len {
        predicted.push(rolling / window_f);
        rolling = rolling + values[t] - values[t - ma_window];
    }

    let actual = &values[ma_window..];
    let error = ErrorSignal::new(
        ma_window,
        compute_error(actual, &predicted, config.error),
        config.error,
    );
    let smoothed = if config.smoothing {
        let span = ((config.smoothing_span_frac * len as f64).floor() as usize).max(1);
        Some(error.smoothed(span))
    } else {
        None
    };
    let scored = smoothed.as_ref().unwrap_or(&error);
    let mask = sliding_threshold(
        &scored.values,
        config.threshold_window_frac,
        config.threshold_step_frac,
        config.sigma_k,
    );
    let intervals = mask_to_intervals(&mask, &scored.values, scored.start);
    let detection = Detection {
        intervals: intervals_to_timestamps(intervals, signal.timestamps()),
        metadata: RunMetadata::default(),
    };
    Ok(DetectorRun {
        detection,
        trace: DetectorTrace {
            predicted,
            error,
            smoothed,
            mask,
        },
    })
}

// ============================================================================
// File formats
// ============================================================================

/// Load a signal from CSV with header `timestamp,value`.
pub fn load_signal_csv<F: Real>(path: impl AsRef<Path>) -> Result<Signal<F>, EvalError> {
    let path_str = path.as_ref().display().to_string();
    let data = std::fs::read_to_string(&path).map_err(|source| EvalError::Io {
        path: path_str.clone(),
        source,
    })?;
    parse_signal_csv(&data, &path_str)
}

fn parse_signal_csv<F: Real>(data: &str, path: &str) -> Result<Signal<F>, EvalError> {
    let parse_err = |line: usize, message: String| EvalError::Parse {
        path: path.to_string(),
        line,
        message,
    };
    let mut lines = data.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim_start_matches('\u{feff}').trim() == "timestamp,value" => {}
        Some((_, header)) => {
            return Err(parse_err(
                1,
                format!("expected header 'timestamp,value', found '{}'", header.trim()),
            ))
        }
        None => return Err(parse_err(1, "empty file".into())),
    }
    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let mut fields = trimmed.split(',');
        let (ts_field, value_field) = match (fields.next(), fields.next(), fields.next()) {
            (Some(a), Some(b), None) => (a.trim(), b.trim()),
            _ => return Err(parse_err(line_no, "expected exactly two columns".into())),
        };
        let timestamp: i64 = ts_field
            .parse()
            .map_err(|_| parse_err(line_no, format!("bad timestamp '{ts_field}'")))?;
        let value: f64 = value_field
            .parse()
            .map_err(|_| parse_err(line_no, format!("bad value '{value_field}'")))?;
        if !value.is_finite() {
            return Err(parse_err(line_no, "value is not finite".into()));
        }
        if let Some(&prev) = timestamps.last() {
            if timestamp <= prev {
                return Err(parse_err(
                    line_no,
                    format!("timestamp {timestamp} not greater than previous {prev}"),
                ));
            }
        }
        timestamps.push(timestamp);
        values.push(F::from_f64_lossy(value));
    }
    Signal::new(timestamps, values).map_err(|e| EvalError::Format {
        path: path.to_string(),
        message: e.to_string(),
    })
}

/// Write a signal in the same CSV format `load_signal_csv` reads.
pub fn write_signal_csv<F: Real>(
    signal: &Signal<F>,
    path: impl AsRef<Path>,
) -> Result<(), EvalError> {
    let mut out = String::from("timestamp,value\n");
    for (ts, v) in signal.timestamps().iter().zip(signal.values()) {
        let _ = writeln!(out, "{ts},{v}");
    }
    std::fs::write(&path, out).map_err(|source| EvalError::Io {
        path: path.as_ref().display().to_string(),
        source,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct TruthInterval {
    start: i64,
    end: i64,
}

/// Load ground truth intervals: a JSON array of `{"start", "end"}`
/// objects, inclusive, in timestamp units.
pub fn load_ground_truth(path: impl AsRef<Path>) -> Result<Vec<AnomalyInterval>, EvalError> {
    let path_str = path.as_ref().display().to_string();
    let data = std::fs::read_to_string(&path).map_err(|source| EvalError::Io {
        path: path_str.clone(),
        source,
    })?;
    let raw: Vec<TruthInterval> = serde_json::from_str(&data).map_err(|e| EvalError::Format {
        path: path_str,
        message: e.to_string(),
    })?;
    Ok(raw
        .into_iter()
        .map(|t| AnomalyInterval::new(t.start, t.end, 0.0))
        .collect())
}

/// Write ground truth intervals in the format `load_ground_truth` reads.
pub fn write_ground_truth(
    intervals: &[AnomalyInterval],
    path: impl AsRef<Path>,
) -> Result<(), EvalError> {
    let raw: Vec<TruthInterval> = intervals
        .iter()
        .map(|i| TruthInterval {
            start: i.start,
            end: i.end,
        })
        .collect();
    let mut json = serde_json::to_string_pretty(&raw).expect("intervals serialize");
    json.push('\n');
    std::fs::write(&path, json).map_err(|source| EvalError::Io {
        path: path.as_ref().display().to_string(),
        source,
    })
}
