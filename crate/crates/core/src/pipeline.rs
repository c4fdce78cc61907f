//! Types shared by the detection pipelines: anomaly intervals, run
//! metadata, and the bounded-parallelism window executor.

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, TokenUsage};

/// A detected (or ground-truth) anomalous segment, inclusive on both
/// ends, expressed in the signal's timestamp units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnomalyInterval {
    pub start: i64,
    pub end: i64,
    /// Peak score inside the interval: max smoothed error for the
    /// forecasting pipeline, max window-vote fraction for the prompting
    /// pipeline.
    pub severity: f64,
}

impl AnomalyInterval {
    pub fn new(start: i64, end: i64, severity: f64) -> Self {
        Self {
            start,
            end,
            severity,
        }
    }

    /// Inclusive overlap of at least one point.
    pub fn overlaps(&self, other: &AnomalyInterval) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

/// Bookkeeping recorded alongside every pipeline run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub windows_total: usize,
    /// Windows the prompting pipeline discarded because every sample
    /// flagged more than the saturation cutoff.
    pub windows_saturated: usize,
    /// Windows rejected by the backend as repetitive input.
    pub windows_repetitive: usize,
    /// Windows whose every sample parsed to garbage.
    pub windows_unparseable: usize,
    /// Windows never attempted because the run aborted early.
    pub windows_skipped: usize,
    /// Detector windows that fell back to a persistence continuation.
    pub fallback_windows: usize,
    /// Individual samples dropped because they parsed to zero values.
    pub dropped_samples: usize,
    pub usage: TokenUsage,
    pub elapsed_ms: u64,
}

/// Final output of a pipeline run.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub intervals: Vec<AnomalyInterval>,
    pub metadata: RunMetadata,
}

/// A pipeline run that could not complete. Carries whatever was merged
/// from the windows that did finish.
#[derive(Debug, Error)]
#[error("pipeline aborted: {error}")]
pub struct PipelineFailure {
    pub error: BackendError,
    pub partial: Box<Detection>,
}

impl PipelineFailure {
    pub fn new(error: BackendError, partial: Detection) -> Self {
        Self {
            error,
            partial: Box::new(partial),
        }
    }

    /// A failure that happened before any window completed.
    pub fn empty(error: BackendError) -> Self {
        Self::new(
            error,
            Detection {
                intervals: Vec::new(),
                metadata: RunMetadata::default(),
            },
        )
    }
}

/// Configuration rejected before any backend work started.
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Codec(#[from] crate::codec::CodecError),
}

/// Outcome of one window's completion request.
pub(crate) enum WindowOutcome<R> {
    Done(R),
    /// Backend rejected the window as repetitive; the window is dropped,
    /// not the run.
    Repetitive,
    /// Never attempted because an earlier window hit a fatal error.
    Skipped,
}

/// Run `job(0..count)` across at most `workers` threads, preserving
/// result order by index.
///
/// A fatal backend error (anything other than a repetitive-input
/// rejection) stops new work; windows already in flight finish, windows
/// not yet started are marked skipped. Returns the per-index outcomes
/// and the first fatal error, if any.
pub(crate) fn run_parallel<R, J>(
    count: usize,
    workers: usize,
    job: J,
) -> (Vec<WindowOutcome<R>>, Option<BackendError>)
where
    R: Send,
    J: Fn(usize) -> Result<R, BackendError> + Sync,
{
    let workers = workers.max(1).min(count.max(1));
    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let slots: Mutex<Vec<Option<WindowOutcome<R>>>> =
        Mutex::new((0..count).map(|_| None).collect());
    let fatal: Mutex<Option<BackendError>> = Mutex::new(None);

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= count {
                    return;
                }
                if abort.load(Ordering::SeqCst) {
                    slots.lock().unwrap()[i] = Some(WindowOutcome::Skipped);
                    continue;
                }
                match job(i) {
                    Ok(r) => slots.lock().unwrap()[i] = Some(WindowOutcome::Done(r)),
                    Err(BackendError::RepetitiveInput(_)) => {
                        slots.lock().unwrap()[i] = Some(WindowOutcome::Repetitive);
                    }
                    Err(e) => {
                        abort.store(true, Ordering::SeqCst);
                        slots.lock().unwrap()[i] = Some(WindowOutcome::Skipped);
                        let mut guard = fatal.lock().unwrap();
                        if guard.is_none() {
                            *guard = Some(e);
                        }
                    }
                }
            });
        }
    });

    let outcomes = slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|slot| slot.expect("every index visited"))
        .collect();
    (outcomes, fatal.into_inner().unwrap())
}

/// Merge consecutive flagged indices (gap zero) into inclusive intervals
/// over raw indices; severity comes from `score` at each index.
pub(crate) fn runs_to_intervals(
    flagged: impl IntoIterator<Item = usize>,
    score: impl Fn(usize) -> f64,
) -> Vec<(usize, usize, f64)> {
    let mut intervals: Vec<(usize, usize, f64)> = Vec::new();
    for idx in flagged {
        match intervals.last_mut() {
            Some((_, end, sev)) if *end + 1 == idx => {
                *end = idx;
                *sev = sev.max(score(idx));
            }
            _ => intervals.push((idx, idx, score(idx))),
        }
    }
    intervals
}

/// Map index-space intervals onto the signal's timestamps.
pub(crate) fn intervals_to_timestamps(
    intervals: Vec<(usize, usize, f64)>,
    timestamps: &[i64],
) -> Vec<AnomalyInterval> {
    intervals
        .into_iter()
        .map(|(s, e, sev)| AnomalyInterval::new(timestamps[s], timestamps[e], sev))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlap_is_inclusive_single_point() {
        let a = AnomalyInterval::new(10, 20, 1.0);
        let b = AnomalyInterval::new(20, 30, 1.0);
        let c = AnomalyInterval::new(21, 30, 1.0);
        assert!(a.overlaps(&b));
        assert!(!a.overlaps(&c));
    }

    #[test]
    fn runs_merge_consecutive_indices_only() {
        let runs = runs_to_intervals([1usize, 2, 4], |i| i as f64);
        assert_eq!(runs, vec![(1, 2, 2.0), (4, 4, 4.0)]);
    }

    #[test]
    fn parallel_preserves_index_order() {
        let (outcomes, fatal) = run_parallel(32, 4, |i| Ok::<usize, BackendError>(i * 2));
        assert!(fatal.is_none());
        for (i, o) in outcomes.iter().enumerate() {
            match o {
                WindowOutcome::Done(v) => assert_eq!(*v, i * 2),
                _ => panic!("unexpected outcome"),
            }
        }
    }

    #[test]
    fn parallel_repetitive_does_not_abort() {
        let (outcomes, fatal) = run_parallel(8, 2, |i| {
            if i % 2 == 0 {
                Err(BackendError::RepetitiveInput("constant window".into()))
            } else {
                Ok(i)
            }
        });
        assert!(fatal.is_none());
        let repetitive = outcomes
            .iter()
            .filter(|o| matches!(o, WindowOutcome::Repetitive))
            .count();
        assert_eq!(repetitive, 4);
    }

    #[test]
    fn parallel_fatal_aborts_remaining() {
        let (outcomes, fatal) = run_parallel(16, 1, |i| {
            if i == 3 {
                Err(BackendError::Unavailable {
                    attempts: 1,
                    reason: "down".into(),
                })
            } else {
                Ok(i)
            }
        });
        assert!(fatal.is_some());
        // with one worker the outcome is deterministic: 0..3 done, rest skipped
        let done = outcomes
            .iter()
            .filter(|o| matches!(o, WindowOutcome::Done(_)))
            .count();
        assert_eq!(done, 3);
        let skipped = outcomes
            .iter()
            .filter(|o| matches!(o, WindowOutcome::Skipped))
            .count();
        assert_eq!(skipped, 13);
    }
}
