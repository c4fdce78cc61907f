//! Forecast-based anomaly detection: predict each window's continuation
//! with the model, reconstruct a predicted series, and threshold the
//! residuals.
//!
//! Each full window of the quantized series requests `n_samples`
//! continuations of `horizon` values. Predictions for the same time step
//! coming from different window offsets collapse by median; the sample
//! dimension collapses by a configurable statistic. Residuals against
//! the original signal are optionally EWMA-smoothed, then a sliding
//! window flags values more than `sigma_k` standard deviations above the
//! local mean.

use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backend::{Backend, BackendError, CompletionRequest};
use crate::codec::{parse_numeric_sequence, serialize_window, CodecConfig, QuantizedSeries, Signal};
use crate::pipeline::{
    intervals_to_timestamps, run_parallel, runs_to_intervals, Detection, PipelineError,
    PipelineFailure, RunMetadata, WindowOutcome,
};
use crate::prompter::{digits_of, prepare_series, token_budget};
use crate::scalar::{self, Real};

/// Statistic used to collapse the sample dimension into one value per
/// time step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleStatistic {
    Mean,
    Median,
    P5,
    P95,
}

impl SampleStatistic {
    pub const ALL: [SampleStatistic; 4] = [
        SampleStatistic::Mean,
        SampleStatistic::Median,
        SampleStatistic::P5,
        SampleStatistic::P95,
    ];

    pub fn apply<F: Real>(self, values: &[F]) -> Option<F> {
        match self {
            SampleStatistic::Mean => scalar::mean(values),
            SampleStatistic::Median => scalar::median(values),
            SampleStatistic::P5 => scalar::quantile(values, 0.05),
            SampleStatistic::P95 => scalar::quantile(values, 0.95),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SampleStatistic::Mean => "mean",
            SampleStatistic::Median => "median",
            SampleStatistic::P5 => "p5",
            SampleStatistic::P95 => "p95",
        }
    }
}

impl FromStr for SampleStatistic {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean" => Ok(SampleStatistic::Mean),
            "median" => Ok(SampleStatistic::Median),
            "p5" => Ok(SampleStatistic::P5),
            "p95" => Ok(SampleStatistic::P95),
            other => Err(format!(
                "unknown statistic '{other}' (expected mean, median, p5 or p95)"
            )),
        }
    }
}

/// Point-wise residual function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorKind {
    Absolute,
    Squared,
}

impl ErrorKind {
    pub const ALL: [ErrorKind; 2] = [ErrorKind::Absolute, ErrorKind::Squared];

    pub fn name(self) -> &'static str {
        match self {
            ErrorKind::Absolute => "absolute",
            ErrorKind::Squared => "squared",
        }
    }
}

impl FromStr for ErrorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "absolute" | "abs" => Ok(ErrorKind::Absolute),
            "squared" | "sq" => Ok(ErrorKind::Squared),
            other => Err(format!(
                "unknown error function '{other}' (expected absolute or squared)"
            )),
        }
    }
}

/// Tuning for the forecasting pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub window_size: usize,
    pub step_size: usize,
    pub horizon: usize,
    pub n_samples: usize,
    pub statistic: SampleStatistic,
    pub error: ErrorKind,
    pub smoothing: bool,
    /// EWMA span, as a fraction of the signal length.
    pub smoothing_span_frac: f64,
    /// Threshold window size, as a fraction of the error-signal length.
    pub threshold_window_frac: f64,
    /// Threshold window step, as a fraction of the error-signal length.
    pub threshold_step_frac: f64,
    /// Standard deviations above the window mean before a value is
    /// flagged.
    pub sigma_k: f64,
    pub temperature: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            window_size: 140,
            step_size: 1,
            horizon: 5,
            n_samples: 10,
            statistic: SampleStatistic::Median,
            error: ErrorKind::Squared,
            smoothing: true,
            smoothing_span_frac: 0.05,
            threshold_window_frac: 1.0 / 3.0,
            threshold_step_frac: 0.1,
            sigma_k: 4.0,
            temperature: 1.0,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.horizon == 0 {
            return Err(PipelineError::Config("horizon must be >= 1".into()));
        }
        if self.window_size < self.horizon {
            return Err(PipelineError::Config(
                "window size must be >= horizon".into(),
            ));
        }
        if self.step_size == 0 || self.step_size > self.horizon {
            return Err(PipelineError::Config(
                "step size must lie in [1, horizon] so forecasts stay contiguous".into(),
            ));
        }
        if self.n_samples == 0 {
            return Err(PipelineError::Config("n_samples must be >= 1".into()));
        }
        for (name, frac) in [
            ("smoothing_span_frac", self.smoothing_span_frac),
            ("threshold_window_frac", self.threshold_window_frac),
            ("threshold_step_frac", self.threshold_step_frac),
        ] {
            if !(frac > 0.0 && frac <= 1.0) {
                return Err(PipelineError::Config(format!(
                    "{name} must lie in (0, 1]"
                )));
            }
        }
        if self.sigma_k < 0.0 {
            return Err(PipelineError::Config("sigma_k must be non-negative".into()));
        }
        if self.temperature < 0.0 {
            return Err(PipelineError::Config(
                "temperature must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Raw continuations per forecast window: `samples[i][j]` holds the
/// parsed values (at most `horizon`) of sample `j` for window `i`.
#[derive(Debug, Clone)]
pub struct WindowForecasts {
    pub starts: Vec<usize>,
    pub samples: Vec<Vec<Vec<u64>>>,
    pub metadata: RunMetadata,
}

/// Residual series aligned to the forecastable part of the signal.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorSignal<F: Real = f64> {
    /// First signal index carrying a residual.
    pub start: usize,
    pub values: Vec<F>,
    pub kind: ErrorKind,
    pub smoothed: bool,
}

impl<F: Real> ErrorSignal<F> {
    pub fn new(start: usize, values: Vec<F>, kind: ErrorKind) -> Self {
        Self {
            start,
            values,
            kind,
            smoothed: false,
        }
    }

    /// EWMA-smoothed copy of this signal.
    pub fn smoothed(&self, span: usize) -> Self {
        Self {
            start: self.start,
            values: smooth_ewma(&self.values, span),
            kind: self.kind,
            smoothed: true,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Offset-collapsed forecasts plus everything needed to post-process
/// them; sweeps over statistic/error/smoothing reuse one of these.
#[derive(Debug)]
pub struct ForecastEnsemble<F: Real = f64> {
    /// `per_index[t - window_size][j]` is sample `j`'s offset-median for
    /// signal index `t`; inner vectors omit samples with no usable
    /// prediction.
    pub per_index: Vec<Vec<F>>,
    pub window_size: usize,
    pub quantized: QuantizedSeries<F>,
    pub metadata: RunMetadata,
    /// Fatal backend error hit mid-run; post-processing then covers only
    /// the windows that finished.
    pub fatal: Option<BackendError>,
}

/// Post-processing trace kept for debugging dumps.
#[derive(Debug, Clone)]
pub struct DetectorTrace<F: Real = f64> {
    pub predicted: Vec<F>,
    pub error: ErrorSignal<F>,
    pub smoothed: Option<ErrorSignal<F>>,
    pub mask: Vec<bool>,
}

impl<F: Real> DetectorTrace<F> {
    /// First signal index covered by the trace vectors.
    pub fn start(&self) -> usize {
        self.error.start
    }

    /// The series the threshold ran on: smoothed when smoothing was
    /// enabled, raw residuals otherwise.
    pub fn scored(&self) -> &ErrorSignal<F> {
        self.smoothed.as_ref().unwrap_or(&self.error)
    }
}

/// Detection plus the intermediate series that produced it.
#[derive(Debug, Clone)]
pub struct DetectorRun<F: Real = f64> {
    pub detection: Detection,
    pub trace: DetectorTrace<F>,
}

/// Request continuations for every full window whose forecast lands
/// inside the series. Samples parsing to zero values are dropped; a
/// window losing every sample falls back to a persistence continuation.
/// Returns the forecasts plus the first fatal backend error, if one
/// aborted the run early.
pub fn forecast_windows<F: Real>(
    quantized: &QuantizedSeries<F>,
    config: &DetectorConfig,
    spaced: bool,
    backend: &dyn Backend,
) -> (WindowForecasts, Option<BackendError>) {
    let len = quantized.len();
    let mut starts = Vec::new();
    let mut start = 0;
    while start + config.window_size < len {
        starts.push(start);
        start += config.step_size;
    }

    let max_digits = digits_of(quantized.values.iter().copied().max().unwrap_or(0));
    let max_tokens = token_budget(config.horizon, max_digits, spaced);

    let (outcomes, fatal) = run_parallel(starts.len(), backend.descriptor().parallelism, |i| {
        let window = &quantized.values[starts[i]..starts[i] + config.window_size];
        let context = serialize_window(window, spaced);
        let mut request = CompletionRequest::new(context, config.n_samples, max_tokens);
        request.temperature = config.temperature;
        backend.complete(&request)
    });

    let mut metadata = RunMetadata {
        windows_total: starts.len(),
        ..RunMetadata::default()
    };
    let mut samples = Vec::with_capacity(starts.len());
    for (i, outcome) in outcomes.into_iter().enumerate() {
        let window = &quantized.values[starts[i]..starts[i] + config.window_size];
        let continuations = match outcome {
            WindowOutcome::Done(response) => {
                metadata.usage.add(response.usage);
                let mut parsed: Vec<Vec<u64>> = Vec::with_capacity(response.samples.len());
                for sample in &response.samples {
                    let mut values = parse_numeric_sequence(sample).values;
                    values.truncate(config.horizon);
                    if values.is_empty() {
                        metadata.dropped_samples += 1;
                    } else {
                        parsed.push(values);
                    }
                }
                if parsed.is_empty() {
                    metadata.fallback_windows += 1;
                    persistence_fallback(window, config)
                } else {
                    parsed
                }
            }
            WindowOutcome::Repetitive => {
                metadata.windows_repetitive += 1;
                metadata.fallback_windows += 1;
                persistence_fallback(window, config)
            }
            WindowOutcome::Skipped => {
                metadata.windows_skipped += 1;
                Vec::new()
            }
        };
        samples.push(continuations);
    }

    (
        WindowForecasts {
            starts,
            samples,
            metadata,
        },
        fatal,
    )
}

fn persistence_fallback(window: &[u64], config: &DetectorConfig) -> Vec<Vec<u64>> {
    let last = *window.last().expect("windows are non-empty");
    vec![vec![last; config.horizon]; config.n_samples]
}

/// Collapse different window offsets predicting the same `(t, sample)`
/// cell into their median.
pub fn collapse_offsets<F: Real>(
    forecasts: &WindowForecasts,
    series_len: usize,
    window_size: usize,
    n_samples: usize,
) -> Vec<Vec<F>> {
    let span = series_len.saturating_sub(window_size);
    let mut cells: Vec<Vec<Vec<F>>> = vec![vec![Vec::new(); n_samples]; span];
    for (i, &start) in forecasts.starts.iter().enumerate() {
        for (j, values) in forecasts.samples[i].iter().enumerate() {
            for (offset, &v) in values.iter().enumerate() {
                let t = start + window_size + offset;
                if t < series_len && j < n_samples {
                    cells[t - window_size][j].push(F::from_f64_lossy(v as f64));
                }
            }
        }
    }
    cells
        .into_iter()
        .map(|samples| {
            samples
                .into_iter()
                .filter_map(|offsets| scalar::median(&offsets))
                .collect()
        })
        .collect()
}

/// Collapse the sample dimension with the chosen statistic. Entries with
/// no predictions yield `None`.
pub fn collapse_samples<F: Real>(
    per_index: &[Vec<F>],
    statistic: SampleStatistic,
) -> Vec<Option<F>> {
    per_index
        .iter()
        .map(|samples| statistic.apply(samples))
        .collect()
}

/// Point-wise residuals between aligned slices.
pub fn compute_error<F: Real>(actual: &[F], predicted: &[F], kind: ErrorKind) -> Vec<F> {
    assert_eq!(
        actual.len(),
        predicted.len(),
        "error inputs must be aligned"
    );
    actual
        .iter()
        .zip(predicted)
        .map(|(&x, &xhat)| {
            let diff = x - xhat;
            match kind {
                ErrorKind::Absolute => diff.abs(),
                ErrorKind::Squared => diff * diff,
            }
        })
        .collect()
}

/// Exponentially weighted moving average with `lambda = 2 / (span + 1)`,
/// seeded with the first element.
pub fn smooth_ewma<F: Real>(errors: &[F], span: usize) -> Vec<F> {
    assert!(span >= 1, "span must be >= 1");
    if errors.is_empty() {
        return Vec::new();
    }
    let lambda = F::from_f64_lossy(2.0) / F::from_usize(span + 1).unwrap();
    let mut out = Vec::with_capacity(errors.len());
    let mut state = errors[0];
    out.push(state);
    for &e in &errors[1..] {
        state = lambda * e + (F::one() - lambda) * state;
        out.push(state);
    }
    out
}

/// Flag indices whose error exceeds `mean + sigma_k * std` (population
/// std) within any sliding window covering them. Window and step sizes
/// are fractions of the error-signal length; the final window truncates
/// at the end.
pub fn sliding_threshold<F: Real>(
    errors: &[F],
    window_frac: f64,
    step_frac: f64,
    sigma_k: f64,
) -> Vec<bool> {
    let len = errors.len();
    if len == 0 {
        return Vec::new();
    }
    let window = ((window_frac * len as f64).floor() as usize).clamp(1, len);
    let step = ((step_frac * len as f64).floor() as usize).max(1);
    let k = F::from_f64_lossy(sigma_k);
    let mut mask = vec![false; len];
    let mut start = 0;
    while start < len {
        let end = (start + window).min(len);
        let slice = &errors[start..end];
        let mu = scalar::mean(slice).expect("slice is non-empty");
        let sd = scalar::population_std(slice, mu);
        let threshold = mu + k * sd;
        for (offset, &e) in slice.iter().enumerate() {
            if e > threshold {
                mask[start + offset] = true;
            }
        }
        start += step;
    }
    mask
}

/// Turn maximal runs of flagged indices into intervals over signal
/// indices (`offset` realigns the mask to the original series);
/// severity is the peak error inside each run.
pub fn mask_to_intervals<F: Real>(
    mask: &[bool],
    errors: &[F],
    offset: usize,
) -> Vec<(usize, usize, f64)> {
    let flagged = mask
        .iter()
        .enumerate()
        .filter(|(_, &f)| f)
        .map(|(i, _)| i);
    runs_to_intervals(flagged, |i| errors[i].to_f64_lossy())
        .into_iter()
        .map(|(s, e, sev)| (s + offset, e + offset, sev))
        .collect()
}

/// Run the model-facing half of the pipeline: quantize, forecast every
/// window, collapse offsets. The result can be post-processed under any
/// statistic/error/smoothing combination.
pub fn collect_forecasts<F: Real>(
    signal: &Signal<F>,
    config: &DetectorConfig,
    codec_config: &CodecConfig,
    backend: &dyn Backend,
) -> Result<ForecastEnsemble<F>, PipelineError> {
    config.validate()?;
    if signal.len() <= config.window_size + config.horizon {
        return Err(PipelineError::Config(format!(
            "signal length {} must exceed window size {} plus horizon {}",
            signal.len(),
            config.window_size,
            config.horizon
        )));
    }
    let started = Instant::now();
    let (quantized, spaced) = prepare_series(signal, codec_config, backend)?;
    let (forecasts, fatal) = forecast_windows(&quantized, config, spaced, backend);
    let per_index = collapse_offsets(
        &forecasts,
        signal.len(),
        config.window_size,
        config.n_samples,
    );
    let mut metadata = forecasts.metadata;
    metadata.elapsed_ms = started.elapsed().as_millis() as u64;
    Ok(ForecastEnsemble {
        per_index,
        window_size: config.window_size,
        quantized,
        metadata,
        fatal,
    })
}

/// Post-process an ensemble into a detection under the given config.
pub fn detect_from_forecasts<F: Real>(
    signal: &Signal<F>,
    ensemble: &ForecastEnsemble<F>,
    config: &DetectorConfig,
) -> DetectorRun<F> {
    let window_size = ensemble.window_size;
    let reconstructed = collapse_samples(&ensemble.per_index, config.statistic);

    // usable prefix: indices up to the first hole (holes only appear
    // after an aborted run)
    let usable = reconstructed
        .iter()
        .position(Option::is_none)
        .unwrap_or(reconstructed.len());
    let predicted: Vec<F> = reconstructed[..usable]
        .iter()
        .map(|v| ensemble.quantized.to_real(v.unwrap().to_f64_lossy()))
        .collect();
    let actual = &signal.values()[window_size..window_size + usable];

    let error = ErrorSignal::new(
        window_size,
        compute_error(actual, &predicted, config.error),
        config.error,
    );
    let smoothed = if config.smoothing && !error.is_empty() {
        let span = ((config.smoothing_span_frac * signal.len() as f64).floor() as usize).max(1);
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
        metadata: ensemble.metadata.clone(),
    };
    DetectorRun {
        detection,
        trace: DetectorTrace {
            predicted,
            error,
            smoothed,
            mask,
        },
    }
}

/// End-to-end forecasting pipeline.
pub fn run_detector<F: Real>(
    signal: &Signal<F>,
    config: &DetectorConfig,
    codec_config: &CodecConfig,
    backend: &dyn Backend,
) -> Result<DetectorRun<F>, PipelineFailure> {
    let mut ensemble = match collect_forecasts(signal, config, codec_config, backend) {
        Ok(e) => e,
        Err(e) => {
            return Err(PipelineFailure::empty(BackendError::InvalidRequest(
                e.to_string(),
            )))
        }
    };
    let run = detect_from_forecasts(signal, &ensemble, config);
    match ensemble.fatal.take() {
        Some(error) => Err(PipelineFailure::new(error, run.detection)),
        None => Ok(run),
    }
}
