//! Reversible transformation between a real-valued univariate series and
//! the textual digit representation fed to language models.
//!
//! The transformation chain is: shift the series into the non-negative
//! range (`scale`), round to a fixed number of decimals and drop the
//! decimal point (`quantize`), segment into rolling windows
//! (`make_windows`), and render each window as comma-separated integers
//! (`serialize_window`), optionally with a space between every digit for
//! tokenizers that chunk multi-digit numbers. Every step is invertible up
//! to the retained precision.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

/// Errors from signal validation and transformation.
#[derive(Debug, Error)]
pub enum CodecError {
    #[error("signal is empty")]
    EmptySignal,
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("timestamps not strictly increasing at index {0}")]
    NonMonotonicTimestamps(usize),
    #[error("timestamp count {timestamps} does not match value count {values}")]
    LengthMismatch { timestamps: usize, values: usize },
    #[error("negative value {value} at index {index}: scale the series before quantizing")]
    NegativeInput { index: usize, value: f64 },
    #[error("quantized value at index {0} exceeds the representable integer range")]
    Overflow(usize),
    #[error("window size must be >= 1")]
    ZeroWindow,
    #[error("step size must be >= 1")]
    ZeroStep,
}

/// A univariate time series: strictly increasing timestamps paired with
/// finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal<F: Real = f64> {
    timestamps: Vec<i64>,
    values: Vec<F>,
}

impl<F: Real> Signal<F> {
    /// Build a signal, validating the type invariants.
    pub fn new(timestamps: Vec<i64>, values: Vec<F>) -> Result<Self, CodecError> {
        if values.is_empty() {
            return Err(CodecError::EmptySignal);
        }
        if timestamps.len() != values.len() {
            return Err(CodecError::LengthMismatch {
                timestamps: timestamps.len(),
                values: values.len(),
            });
        }
        for (i, v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(CodecError::NonFinite(i));
            }
        }
        for i in 1..timestamps.len() {
            if timestamps[i] <= timestamps[i - 1] {
                return Err(CodecError::NonMonotonicTimestamps(i));
            }
        }
        Ok(Self { timestamps, values })
    }

    /// Build a signal indexed 0..n, for synthetic data and tests.
    pub fn from_values(values: Vec<F>) -> Result<Self, CodecError> {
        let timestamps = (0..values.len() as i64).collect();
        Self::new(timestamps, values)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn timestamps(&self) -> &[i64] {
        &self.timestamps
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }
}

/// The shift applied by [`scale`], retained so the transform can be
/// inverted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleTransform<F: Real = f64> {
    pub min_offset: F,
}

impl<F: Real> ScaleTransform<F> {
    /// A no-op transform, for series that are already non-negative and
    /// should pass through unshifted.
    pub fn identity() -> Self {
        Self {
            min_offset: F::zero(),
        }
    }
}

/// Non-negative integer series plus the metadata needed to invert it
/// back into real space.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedSeries<F: Real = f64> {
    pub values: Vec<u64>,
    pub decimals: u32,
    pub scale: ScaleTransform<F>,
}

impl<F: Real> QuantizedSeries<F> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Map a single quantized value back to the original real space
    /// (undo quantization, then undo scaling).
    pub fn to_real(&self, quantized: f64) -> F {
        let divisor = F::from_f64_lossy(10f64.powi(self.decimals as i32));
        F::from_f64_lossy(quantized) / divisor + self.scale.min_offset
    }
}

/// Rolling windows over an integer series.
///
/// Window `i` covers indices `[i*s, i*s + w)`; windows are emitted while
/// `i*s < len`, and trailing windows are truncated at the series end so
/// that every index is covered.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSet {
    pub windows: Vec<Vec<u64>>,
    pub starts: Vec<usize>,
    pub window_size: usize,
    pub step_size: usize,
    pub series_len: usize,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }
}

/// Codec settings shared by both pipelines.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct CodecConfig {
    /// Shift the series into the non-negative range before quantizing.
    pub scale: bool,
    /// Decimal digits retained by quantization; `None` picks
    /// automatically via [`auto_decimals`].
    pub decimals: Option<u32>,
    /// Insert a space between every digit; `None` defers to the
    /// backend's tokenizer-chunking hint.
    pub space: Option<bool>,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            scale: true,
            decimals: None,
            space: None,
        }
    }
}

/// Subtract the series minimum, projecting values into the non-negative
/// range.
pub fn scale<F: Real>(values: &[F]) -> Result<(Vec<F>, ScaleTransform<F>), CodecError> {
    if values.is_empty() {
        return Err(CodecError::EmptySignal);
    }
    for (i, v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(CodecError::NonFinite(i));
        }
    }
    let min = values.iter().copied().fold(F::infinity(), F::min);
    let scaled = values.iter().map(|&v| v - min).collect();
    Ok((scaled, ScaleTransform { min_offset: min }))
}

/// Invert [`scale`]: add the recorded minimum back.
pub fn descale<F: Real>(values: &[F], transform: &ScaleTransform<F>) -> Vec<F> {
    values.iter().map(|&v| v + transform.min_offset).collect()
}

/// Quantize a non-negative series to integers carrying `decimals`
/// fractional digits. Rounds half away from zero.
pub fn quantize<F: Real>(
    scaled: &[F],
    decimals: u32,
    transform: ScaleTransform<F>,
) -> Result<QuantizedSeries<F>, CodecError> {
    let factor = F::from_f64_lossy(10f64.powi(decimals as i32));
    // Quantized values must stay exactly representable in f64.
    let max_exact = F::from_f64_lossy(9.0e15);
    let mut values = Vec::with_capacity(scaled.len());
    for (i, &v) in scaled.iter().enumerate() {
        if v < F::zero() {
            return Err(CodecError::NegativeInput {
                index: i,
                value: v.to_f64_lossy(),
            });
        }
        let rounded = (v * factor).round();
        if !rounded.is_finite() || rounded > max_exact {
            return Err(CodecError::Overflow(i));
        }
        values.push(rounded.to_u64().ok_or(CodecError::Overflow(i))?);
    }
    Ok(QuantizedSeries {
        values,
        decimals,
        scale: transform,
    })
}

/// Invert quantization: divide by `10^decimals`. Stays in scaled space;
/// compose with [`descale`] to recover the original range.
pub fn dequantize<F: Real>(q: &QuantizedSeries<F>) -> Vec<F> {
    let divisor = F::from_f64_lossy(10f64.powi(q.decimals as i32));
    q.values
        .iter()
        .map(|&v| F::from_f64_lossy(v as f64) / divisor)
        .collect()
}

/// Pick a decimal precision for a scaled series: 2 digits once the
/// dynamic range exceeds 1, otherwise as many digits as keep the largest
/// quantized value within six digits.
pub fn auto_decimals<F: Real>(scaled: &[F]) -> u32 {
    let max = scaled
        .iter()
        .copied()
        .fold(F::zero(), F::max)
        .to_f64_lossy();
    if max > 1.0 {
        return 2;
    }
    if max <= 0.0 {
        return 2;
    }
    let mut decimals = 0u32;
    while decimals < 12 {
        let next = (max * 10f64.powi(decimals as i32 + 1)).round();
        if next >= 1_000_000.0 {
            break;
        }
        decimals += 1;
    }
    decimals
}

/// Segment an integer series into rolling windows.
///
/// A window at least as long as the series yields one window covering
/// the whole series.
pub fn make_windows(
    series: &[u64],
    window_size: usize,
    step_size: usize,
) -> Result<WindowSet, CodecError> {
    if window_size == 0 {
        return Err(CodecError::ZeroWindow);
    }
    if step_size == 0 {
        return Err(CodecError::ZeroStep);
    }
    if series.is_empty() {
        return Err(CodecError::EmptySignal);
    }
    let len = series.len();
    if window_size >= len {
        return Ok(WindowSet {
            windows: vec![series.to_vec()],
            starts: vec![0],
            window_size,
            step_size,
            series_len: len,
        });
    }
    let mut windows = Vec::new();
    let mut starts = Vec::new();
    let mut start = 0;
    while start < len {
        let end = (start + window_size).min(len);
        windows.push(series[start..end].to_vec());
        starts.push(start);
        start += step_size;
    }
    Ok(WindowSet {
        windows,
        starts,
        window_size,
        step_size,
        series_len: len,
    })
}

/// Render a window as text: values joined by commas, and when
/// `space_digits` is set, a single space between every digit and comma.
pub fn serialize_window(window: &[u64], space_digits: bool) -> String {
    let joined = window
        .iter()
        .map(u64::to_string)
        .collect::<Vec<_>>()
        .join(",");
    if !space_digits {
        return joined;
    }
    let mut out = String::with_capacity(joined.len() * 2);
    for (i, c) in joined.chars().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push(c);
    }
    out
}

/// Result of parsing model output back into integers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedSequence {
    /// The maximal leading run of well-formed non-negative integers.
    pub values: Vec<u64>,
    /// Tokens discarded after the first non-conforming one.
    pub discarded: usize,
}

impl ParsedSequence {
    pub fn is_clean(&self) -> bool {
        self.discarded == 0
    }
}

/// Parse a textual number sequence, tolerating the digit spacing used on
/// the way in and the noise models emit on the way out.
///
/// Splits on commas and newlines, strips spaces and tabs inside each
/// token, and keeps the maximal leading run of non-negative integers.
/// Parsing stops at the first non-conforming token; that token and
/// everything after it are counted as discarded. A trailing separator is
/// not an error.
pub fn parse_numeric_sequence(text: &str) -> ParsedSequence {
    let tokens: Vec<String> = text
        .split([',', '\n'])
        .map(|t| t.chars().filter(|c| !c.is_whitespace()).collect())
        .collect();
    let mut values = Vec::new();
    for (i, token) in tokens.iter().enumerate() {
        if token.is_empty() && i == tokens.len() - 1 {
            break;
        }
        if token.is_empty() || !token.bytes().all(|b| b.is_ascii_digit()) {
            return ParsedSequence {
                values,
                discarded: tokens.len() - i,
            };
        }
        match token.parse::<u64>() {
            Ok(v) => values.push(v),
            Err(_) => {
                return ParsedSequence {
                    values,
                    discarded: tokens.len() - i,
                }
            }
        }
    }
    ParsedSequence {
        values,
        discarded: 0,
    }
}

/// Parse the trailing numeric run of a text, ignoring any leading prose.
///
/// Used by stub backends to recover the window values from a prompt that
/// may carry instructions before the serialized sequence.
pub fn parse_numeric_tail(text: &str) -> Vec<u64> {
    let trimmed = text.trim_end_matches(|c: char| !c.is_ascii_digit());
    let mut start = trimmed.len();
    for (idx, c) in trimmed.char_indices().rev() {
        if c.is_ascii_digit() || c == ',' || c.is_whitespace() {
            start = idx;
        } else {
            break;
        }
    }
    parse_numeric_sequence(&trimmed[start..]).values
}
