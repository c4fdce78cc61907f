//! Prompt-based anomaly detection: ask the model directly which values
//! in a window are anomalous, then merge votes across samples and across
//! overlapping windows.
//!
//! Each window is sent with a fixed instruction prompt; the model
//! answers with the values it considers anomalous. Those values map back
//! to window positions, per-sample position sets merge under the `alpha`
//! threshold, and per-window sets merge under the `beta` threshold
//! across all windows covering each index. Consecutive surviving indices
//! become anomaly intervals.

use std::collections::BTreeSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backend::{Backend, CompletionRequest};
use crate::codec::{
    self, parse_numeric_sequence, serialize_window, CodecConfig, Signal,
};
use crate::pipeline::{
    intervals_to_timestamps, run_parallel, runs_to_intervals, Detection, PipelineError,
    PipelineFailure, RunMetadata, WindowOutcome,
};
use crate::scalar::Real;

/// Fixed instruction prefix; the serialized window is appended after
/// "Sequence: " and the prompt ends with a period.
const PROMPT_TEMPLATE: &str = "You are an exceptionally intelligent assistant that detects \
anomalies in time series data by listing all the anomalies. Below is a sequence, please return \
the anomalies in that sequence. Do not say anything like 'the anomalous indices in the sequence \
are', just return the numbers. Sequence: ";

/// Tuning for the prompting pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrompterConfig {
    /// Window length; long-context datasets can go up to 500.
    pub window_size: usize,
    pub step_size: usize,
    pub n_samples: usize,
    /// Fraction of samples that must flag an index.
    pub alpha: f64,
    /// Fraction of covering windows that must flag an index.
    pub beta: f64,
    /// Windows where every sample flags more than this fraction of the
    /// window are discarded.
    pub saturation_cutoff: f64,
    pub temperature: f64,
}

impl Default for PrompterConfig {
    fn default() -> Self {
        Self {
            window_size: 200,
            step_size: 40,
            n_samples: 10,
            alpha: 0.4,
            beta: 0.9,
            saturation_cutoff: 0.5,
            temperature: 1.0,
        }
    }
}

impl PrompterConfig {
    /// Window/step defaults for long-context models (SMAP/MSL-sized
    /// signals).
    pub fn long_context() -> Self {
        Self {
            window_size: 500,
            step_size: 100,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.step_size == 0 || self.window_size <= self.step_size {
            return Err(PipelineError::Config(
                "window size must exceed step size, and step size must be >= 1".into(),
            ));
        }
        if self.n_samples == 0 {
            return Err(PipelineError::Config("n_samples must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) || !(0.0..=1.0).contains(&self.beta) {
            return Err(PipelineError::Config(
                "alpha and beta must lie in [0, 1]".into(),
            ));
        }
        if !(self.saturation_cutoff > 0.0 && self.saturation_cutoff <= 1.0) {
            return Err(PipelineError::Config(
                "saturation cutoff must lie in (0, 1]".into(),
            ));
        }
        if self.temperature < 0.0 {
            return Err(PipelineError::Config(
                "temperature must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Why a window contributes no votes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiscardReason {
    Saturated,
    RepetitiveError,
    Unparseable,
}

/// Per-window voting state: one set of flagged window positions per
/// sample.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowVote {
    pub window_index: usize,
    pub start: usize,
    pub window_len: usize,
    pub flagged: Vec<BTreeSet<usize>>,
    pub discarded: Option<DiscardReason>,
}

impl WindowVote {
    pub fn is_discarded(&self) -> bool {
        self.discarded.is_some()
    }
}

/// Build the detection prompt around a serialized window.
pub fn build_prompt(window_text: &str) -> Result<String, PipelineError> {
    if window_text.is_empty() {
        return Err(PipelineError::Config(
            "cannot build a prompt around an empty window".into(),
        ));
    }
    Ok(format!("{PROMPT_TEMPLATE}{window_text}."))
}

/// Map flagged values to window positions: every position holding a
/// flagged value is flagged, all occurrences included. Returns the
/// position set and the count of flagged values absent from the window.
pub fn values_to_indices(window: &[u64], flagged_values: &[u64]) -> (BTreeSet<usize>, usize) {
    let mut indices = BTreeSet::new();
    let mut ignored = 0;
    for value in flagged_values {
        let mut found = false;
        for (pos, v) in window.iter().enumerate() {
            if v == value {
                indices.insert(pos);
                found = true;
            }
        }
        if !found {
            ignored += 1;
        }
    }
    (indices, ignored)
}

/// Discard the window when every sample flags strictly more than
/// `cutoff * window_len` distinct positions.
pub fn filter_saturated(mut vote: WindowVote, cutoff: f64) -> WindowVote {
    if vote.is_discarded() || vote.flagged.is_empty() {
        return vote;
    }
    let limit = cutoff * vote.window_len as f64;
    if vote.flagged.iter().all(|set| set.len() as f64 > limit) {
        vote.discarded = Some(DiscardReason::Saturated);
    }
    vote
}

/// Keep positions flagged by at least `alpha` of the `n_samples`
/// requested samples.
pub fn merge_samples(vote: &WindowVote, alpha: f64, n_samples: usize) -> BTreeSet<usize> {
    let mut kept = BTreeSet::new();
    if vote.is_discarded() || n_samples == 0 {
        return kept;
    }
    let mut counts: std::collections::BTreeMap<usize, usize> = std::collections::BTreeMap::new();
    for set in &vote.flagged {
        for &idx in set {
            *counts.entry(idx).or_insert(0) += 1;
        }
    }
    for (idx, count) in counts {
        if count as f64 / n_samples as f64 >= alpha {
            kept.insert(idx);
        }
    }
    kept
}

/// Merge per-window global index sets across overlapping windows.
///
/// For each index, the vote fraction divides the number of covering
/// windows that flagged it by `min(ceil(w/s), covering windows)`; the
/// actual cover count takes over near the series edges, where fewer
/// windows exist. `per_window` must already exclude discarded windows;
/// its sets hold global indices.
pub fn merge_windows(
    per_window: &[(usize, BTreeSet<usize>)],
    window_size: usize,
    step_size: usize,
    series_len: usize,
    beta: f64,
) -> BTreeSet<usize> {
    let nominal = window_size.div_ceil(step_size);
    let mut votes = vec![0usize; series_len];
    let mut cover = vec![0usize; series_len];
    for (start, flagged) in per_window {
        let end = (start + window_size).min(series_len);
        for slot in &mut cover[*start..end] {
            *slot += 1;
        }
        for &t in flagged {
            if t >= *start && t < end {
                votes[t] += 1;
            }
        }
    }
    let mut kept = BTreeSet::new();
    for t in 0..series_len {
        // an index must appear in at least one window vote; beta = 0
        // does not flag untouched indices
        if cover[t] == 0 || votes[t] == 0 {
            continue;
        }
        let denom = nominal.min(cover[t]);
        if votes[t] as f64 / denom as f64 >= beta {
            kept.insert(t);
        }
    }
    kept
}

/// Votes gathered from the backend, before threshold merging. Keeping
/// this separate lets sweeps over `alpha`/`beta` reuse one set of
/// completions.
#[derive(Debug, Clone)]
pub struct VoteSet {
    pub votes: Vec<WindowVote>,
    pub window_size: usize,
    pub step_size: usize,
    pub series_len: usize,
    pub n_samples: usize,
    pub metadata: RunMetadata,
}

/// Query the backend for every window and parse the votes.
pub fn collect_votes<F: Real>(
    signal: &Signal<F>,
    config: &PrompterConfig,
    codec_config: &CodecConfig,
    backend: &dyn Backend,
) -> Result<VoteSet, PipelineFailure> {
    let started = Instant::now();
    config.validate().map_err(|e| {
        PipelineFailure::empty(crate::backend::BackendError::InvalidRequest(e.to_string()))
    })?;
    let (quantized, spaced) = prepare_series(signal, codec_config, backend).map_err(|e| {
        PipelineFailure::empty(crate::backend::BackendError::InvalidRequest(e.to_string()))
    })?;
    let windows = codec::make_windows(&quantized.values, config.window_size, config.step_size)
        .expect("validated configuration");

    // worst case the model flags every value in the window
    let max_digits = digits_of(quantized.values.iter().copied().max().unwrap_or(0));
    let max_tokens = token_budget(config.window_size, max_digits, spaced);

    let (outcomes, fatal) = run_parallel(
        windows.len(),
        backend.descriptor().parallelism,
        |i| {
            let text = serialize_window(&windows.windows[i], spaced);
            let prompt = build_prompt(&text)
                .map_err(|e| crate::backend::BackendError::InvalidRequest(e.to_string()))?;
            let mut request = CompletionRequest::new(prompt, config.n_samples, max_tokens);
            request.temperature = config.temperature;
            backend.complete(&request)
        },
    );

    let mut metadata = RunMetadata {
        windows_total: windows.len(),
        ..RunMetadata::default()
    };
    let mut votes = Vec::with_capacity(windows.len());
    for (i, outcome) in outcomes.into_iter().enumerate() {
        let window = &windows.windows[i];
        let vote = match outcome {
            WindowOutcome::Done(response) => {
                metadata.usage.add(response.usage);
                parse_window_vote(i, windows.starts[i], window, &response.samples)
            }
            WindowOutcome::Repetitive => {
                metadata.windows_repetitive += 1;
                WindowVote {
                    window_index: i,
                    start: windows.starts[i],
                    window_len: window.len(),
                    flagged: Vec::new(),
                    discarded: Some(DiscardReason::RepetitiveError),
                }
            }
            WindowOutcome::Skipped => {
                metadata.windows_skipped += 1;
                continue;
            }
        };
        let vote = filter_saturated(vote, config.saturation_cutoff);
        match vote.discarded {
            Some(DiscardReason::Saturated) => metadata.windows_saturated += 1,
            Some(DiscardReason::Unparseable) => metadata.windows_unparseable += 1,
            _ => {}
        }
        votes.push(vote);
    }
    metadata.elapsed_ms = started.elapsed().as_millis() as u64;

    let set = VoteSet {
        votes,
        window_size: config.window_size,
        step_size: config.step_size,
        series_len: signal.len(),
        n_samples: config.n_samples,
        metadata,
    };
    match fatal {
        Some(error) => Err(PipelineFailure::new(
            error,
            merge_detections(signal, &set, config.alpha, config.beta),
        )),
        None => Ok(set),
    }
}

/// Merge collected votes into intervals under the given thresholds.
pub fn merge_detections<F: Real>(
    signal: &Signal<F>,
    set: &VoteSet,
    alpha: f64,
    beta: f64,
) -> Detection {
    let per_window: Vec<(usize, BTreeSet<usize>)> = set
        .votes
        .iter()
        .filter(|v| !v.is_discarded())
        .map(|v| {
            let local = merge_samples(v, alpha, set.n_samples);
            let global: BTreeSet<usize> = local.into_iter().map(|p| v.start + p).collect();
            (v.start, global)
        })
        .collect();
    let flagged = merge_windows(
        &per_window,
        set.window_size,
        set.step_size,
        set.series_len,
        beta,
    );

    // severity: fraction of covering windows that flagged the index
    let nominal = set.window_size.div_ceil(set.step_size);
    let mut votes = vec![0usize; set.series_len];
    let mut cover = vec![0usize; set.series_len];
    for (start, global) in &per_window {
        let end = (start + set.window_size).min(set.series_len);
        for slot in &mut cover[*start..end] {
            *slot += 1;
        }
        for &t in global {
            if t >= *start && t < end {
                votes[t] += 1;
            }
        }
    }
    let score = |t: usize| {
        let denom = nominal.min(cover[t]);
        if denom == 0 {
            0.0
        } else {
            votes[t] as f64 / denom as f64
        }
    };

    let intervals = runs_to_intervals(flagged, score);
    Detection {
        intervals: intervals_to_timestamps(intervals, signal.timestamps()),
        metadata: set.metadata.clone(),
    }
}

/// End-to-end prompting pipeline.
pub fn run_prompter<F: Real>(
    signal: &Signal<F>,
    config: &PrompterConfig,
    codec_config: &CodecConfig,
    backend: &dyn Backend,
) -> Result<Detection, PipelineFailure> {
    let set = collect_votes(signal, config, codec_config, backend)?;
    Ok(merge_detections(signal, &set, config.alpha, config.beta))
}

fn parse_window_vote(
    window_index: usize,
    start: usize,
    window: &[u64],
    samples: &[String],
) -> WindowVote {
    let mut flagged = Vec::with_capacity(samples.len());
    let mut garbage = 0;
    for sample in samples {
        let parsed = parse_numeric_sequence(sample);
        if parsed.values.is_empty() && parsed.discarded > 0 {
            garbage += 1;
        }
        let (indices, _ignored) = values_to_indices(window, &parsed.values);
        flagged.push(indices);
    }
    let discarded = if !samples.is_empty() && garbage == samples.len() {
        Some(DiscardReason::Unparseable)
    } else {
        None
    };
    WindowVote {
        window_index,
        start,
        window_len: window.len(),
        flagged,
        discarded,
    }
}

/// Scale and quantize the signal per the codec settings; the spacing
/// choice defers to the backend's tokenizer hint when unset.
pub(crate) fn prepare_series<F: Real>(
    signal: &Signal<F>,
    codec_config: &CodecConfig,
    backend: &dyn Backend,
) -> Result<(codec::QuantizedSeries<F>, bool), crate::codec::CodecError> {
    let (scaled, transform) = if codec_config.scale {
        codec::scale(signal.values())?
    } else {
        (
            signal.values().to_vec(),
            codec::ScaleTransform::identity(),
        )
    };
    let decimals = codec_config
        .decimals
        .unwrap_or_else(|| codec::auto_decimals(&scaled));
    let quantized = codec::quantize(&scaled, decimals, transform)?;
    let spaced = codec_config
        .space
        .unwrap_or(backend.descriptor().chunked_tokenizer);
    Ok((quantized, spaced))
}

pub(crate) fn digits_of(value: u64) -> usize {
    value.to_string().len()
}

/// Character budget for `n_values` serialized values: digits plus one
/// separator each, doubled when digits are spaced out, plus slack.
pub(crate) fn token_budget(n_values: usize, max_digits: usize, spaced: bool) -> usize {
    let per_value = (max_digits + 1) * if spaced { 2 } else { 1 };
    n_values * per_value + 8
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{ReplayStub, Transcript, TranscriptEntry};

    // ==================== prompt ====================

    #[test]
    fn prompt_wraps_sequence_and_ends_with_period() {
        let p = build_prompt("244,309,2,462").unwrap();
        assert!(p.starts_with("You are an exceptionally intelligent assistant"));
        assert!(p.ends_with("Sequence: 244,309,2,462."));
    }

    #[test]
    fn prompt_rejects_empty_window() {
        assert!(build_prompt("").is_err());
    }

    #[test]
    fn prompt_matches_golden_file() {
        let golden = include_str!("../tests/fixtures/prompt_golden.txt");
        let p = build_prompt("244,309,2,462").unwrap();
        assert_eq!(p, golden.trim_end_matches('\n'));
    }

    // ==================== values_to_indices ====================

    #[test]
    fn flagged_value_maps_to_its_position() {
        let (idx, ignored) = values_to_indices(&[244, 309, 2, 462], &[2]);
        assert_eq!(idx, BTreeSet::from([2]));
        assert_eq!(ignored, 0);
    }

    #[test]
    fn flagged_value_maps_to_all_occurrences() {
        let (idx, _) = values_to_indices(&[5, 9, 5], &[5]);
        assert_eq!(idx, BTreeSet::from([0, 2]));
    }

    #[test]
    fn absent_flagged_values_are_ignored_and_counted() {
        let (idx, ignored) = values_to_indices(&[1, 2, 3], &[7]);
        assert!(idx.is_empty());
        assert_eq!(ignored, 1);
    }

    // ==================== merge_samples ====================

    fn vote_with_sets(sets: Vec<BTreeSet<usize>>, window_len: usize) -> WindowVote {
        WindowVote {
            window_index: 0,
            start: 0,
            window_len,
            flagged: sets,
            discarded: None,
        }
    }

    #[test]
    fn alpha_threshold_is_at_least() {
        // index 0 flagged in 4 of 10 samples
        let mut sets = vec![BTreeSet::from([0]); 4];
        sets.extend(vec![BTreeSet::new(); 6]);
        let vote = vote_with_sets(sets, 10);
        assert!(merge_samples(&vote, 0.4, 10).contains(&0));

        // 3 of 10 misses the 0.4 threshold
        let mut sets = vec![BTreeSet::from([0]); 3];
        sets.extend(vec![BTreeSet::new(); 7]);
        let vote = vote_with_sets(sets, 10);
        assert!(!merge_samples(&vote, 0.4, 10).contains(&0));
    }

    #[test]
    fn discarded_vote_contributes_nothing() {
        let mut vote = vote_with_sets(vec![BTreeSet::from([0]); 10], 10);
        vote.discarded = Some(DiscardReason::Saturated);
        assert!(merge_samples(&vote, 0.1, 10).is_empty());
    }

    // ==================== filter_saturated ====================

    #[test]
    fn all_samples_over_cutoff_discards() {
        let set: BTreeSet<usize> = (0..120).collect();
        let vote = vote_with_sets(vec![set; 10], 200);
        let filtered = filter_saturated(vote, 0.5);
        assert_eq!(filtered.discarded, Some(DiscardReason::Saturated));
    }

    #[test]
    fn one_modest_sample_keeps_the_window() {
        let big: BTreeSet<usize> = (0..150).collect();
        let small: BTreeSet<usize> = (0..10).collect();
        let mut sets = vec![big; 9];
        sets.push(small);
        let vote = vote_with_sets(sets, 200);
        assert!(filter_saturated(vote, 0.5).discarded.is_none());
    }

    #[test]
    fn exactly_at_cutoff_is_kept() {
        // strictly-more-than rule: 100 of 200 at cutoff 0.5 stays
        let set: BTreeSet<usize> = (0..100).collect();
        let vote = vote_with_sets(vec![set; 10], 200);
        assert!(filter_saturated(vote, 0.5).discarded.is_none());
    }

    // ==================== merge_windows ====================

    #[test]
    fn beta_uses_nominal_overlap_in_the_interior() {
        // w=200, s=40 -> nominal 5 covering windows
        let flagged: BTreeSet<usize> = BTreeSet::from([200]);
        let per_window: Vec<(usize, BTreeSet<usize>)> = (0..=5)
            .map(|i| (i * 40, flagged.clone()))
            .collect();
        // index 200 is covered by windows starting at 40..=200 (5 of them)
        let kept = merge_windows(&per_window, 200, 40, 440, 0.9);
        assert!(kept.contains(&200));

        // flagged by only 4 of those 5 misses beta=0.9
        let mut per_window = per_window;
        per_window[5].1.clear();
        let kept = merge_windows(&per_window, 200, 40, 440, 0.9);
        assert!(!kept.contains(&200));
    }

    #[test]
    fn edge_indices_use_actual_cover_count() {
        // index 0 is covered only by the first window
        let per_window = vec![(0usize, BTreeSet::from([0usize])), (40, BTreeSet::new())];
        let kept = merge_windows(&per_window, 200, 40, 240, 1.0);
        assert!(kept.contains(&0));
    }

    // ==================== end-to-end with replay ====================

    #[test]
    fn replayed_single_window_flags_matching_index() {
        // quantized values 244,309,2,462 with d=0 and no scaling offset
        let signal = Signal::from_values(vec![244.0, 309.0, 2.0, 462.0]).unwrap();
        let config = PrompterConfig {
            window_size: 4,
            step_size: 2,
            n_samples: 2,
            alpha: 0.5,
            beta: 0.5,
            saturation_cutoff: 0.5,
            temperature: 1.0,
        };
        let codec_config = CodecConfig {
            scale: false,
            decimals: Some(0),
            space: Some(false),
        };
        let prompt_full = build_prompt("244,309,2,462").unwrap();
        let prompt_tail = build_prompt("2,462").unwrap();
        let transcript = Transcript {
            entries: vec![
                TranscriptEntry {
                    context: prompt_full,
                    samples: vec!["2".into(), "2".into()],
                },
                TranscriptEntry {
                    context: prompt_tail,
                    samples: vec!["2".into(), "".into()],
                },
            ],
        };
        let backend = ReplayStub::new(transcript);
        let detection = run_prompter(&signal, &config, &codec_config, &backend).unwrap();
        assert_eq!(detection.intervals.len(), 1);
        assert_eq!(detection.intervals[0].start, 2);
        assert_eq!(detection.intervals[0].end, 2);
    }

    #[test]
    fn all_repetitive_windows_yield_empty_detections() {
        let signal = Signal::from_values(vec![5.0; 20]).unwrap();
        let config = PrompterConfig {
            window_size: 8,
            step_size: 4,
            n_samples: 2,
            ..PrompterConfig::default()
        };
        let codec_config = CodecConfig {
            scale: true,
            decimals: Some(0),
            space: Some(false),
        };
        let backend = crate::backend::PersistenceStub::new().rejecting_repetitive();
        let detection = run_prompter(&signal, &config, &codec_config, &backend).unwrap();
        assert!(detection.intervals.is_empty());
        assert_eq!(detection.metadata.windows_repetitive, detection.metadata.windows_total);
    }

    #[test]
    fn unanimity_thresholds_drop_disagreeing_samples() {
        let signal = Signal::from_values(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let config = PrompterConfig {
            window_size: 6,
            step_size: 3,
            n_samples: 2,
            alpha: 1.0,
            beta: 1.0,
            saturation_cutoff: 0.9,
            temperature: 1.0,
        };
        let codec_config = CodecConfig {
            scale: false,
            decimals: Some(0),
            space: Some(false),
        };
        let transcript = Transcript {
            entries: vec![
                TranscriptEntry {
                    context: build_prompt("1,2,3,4,5,6").unwrap(),
                    samples: vec!["1".into(), "2".into()], // samples disagree
                },
                TranscriptEntry {
                    context: build_prompt("4,5,6").unwrap(),
                    samples: vec!["4".into(), "5".into()],
                },
            ],
        };
        let backend = ReplayStub::new(transcript);
        let detection = run_prompter(&signal, &config, &codec_config, &backend).unwrap();
        assert!(detection.intervals.is_empty());
    }
}
