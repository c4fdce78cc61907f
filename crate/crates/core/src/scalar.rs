//! Scalar abstraction for the numeric kernels.
//!
//! All series math (scaling, quantization, residuals, smoothing,
//! thresholding) is generic over [`Real`] so the same code runs in `f32`
//! or `f64`. Concrete aliases for the common `f64` instantiation live at
//! the crate root.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar usable throughout the crate.
///
/// Blanket-implemented for anything float-like; in practice `f32` and
/// `f64`.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from `f64`, for constants and config values.
    fn from_f64_lossy(value: f64) -> Self {
        Self::from_f64(value).expect("finite f64 converts to any Real")
    }

    /// Lossy conversion to `f64`, for reporting.
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("Real converts to f64")
    }
}

impl<T> Real for T where
    T: Float + FromPrimitive + ToPrimitive + Debug + Display + Send + Sync + 'static
{
}

/// Arithmetic mean. Returns `None` on empty input.
pub(crate) fn mean<F: Real>(values: &[F]) -> Option<F> {
    if values.is_empty() {
        return None;
    }
    let sum = values.iter().fold(F::zero(), |acc, &v| acc + v);
    Some(sum / F::from_usize(values.len()).unwrap())
}

/// Population standard deviation (divide by n, not n-1).
pub(crate) fn population_std<F: Real>(values: &[F], mean: F) -> F {
    if values.is_empty() {
        return F::zero();
    }
    let sq_sum = values
        .iter()
        .fold(F::zero(), |acc, &v| acc + (v - mean) * (v - mean));
    (sq_sum / F::from_usize(values.len()).unwrap()).sqrt()
}

/// Median of a slice; even-length inputs average the middle pair.
/// Returns `None` on empty input.
pub(crate) fn median<F: Real>(values: &[F]) -> Option<F> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = sorted.len();
    if n % 2 == 1 {
        Some(sorted[n / 2])
    } else {
        let two = F::from_f64_lossy(2.0);
        Some((sorted[n / 2 - 1] + sorted[n / 2]) / two)
    }
}

/// Quantile with linear interpolation between closest ranks.
///
/// `q` in [0, 1]; rank position is `q * (n - 1)`. Returns `None` on
/// empty input.
pub(crate) fn quantile<F: Real>(values: &[F], q: f64) -> Option<F> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = sorted.len();
    let pos = q * (n - 1) as f64;
    let lower = pos.floor() as usize;
    let upper = pos.ceil() as usize;
    if lower == upper || upper >= n {
        return Some(sorted[lower.min(n - 1)]);
    }
    let frac = F::from_f64_lossy(pos - lower as f64);
    Some(sorted[lower] * (F::one() - frac) + sorted[upper] * frac)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_odd_even() {
        assert_eq!(median(&[1.0, 3.0, 100.0]), Some(3.0));
        assert_eq!(median(&[2.0, 4.0]), Some(3.0));
        assert_eq!(median::<f64>(&[]), None);
    }

    #[test]
    fn quantile_interpolates_between_ranks() {
        let v: Vec<f64> = (0..10).map(|i| i as f64).collect();
        // rank = 0.95 * 9 = 8.55 -> 8 * 0.45 + 9 * 0.55
        assert!((quantile(&v, 0.95).unwrap() - 8.55).abs() < 1e-12);
        assert_eq!(quantile(&v, 0.0), Some(0.0));
        assert_eq!(quantile(&v, 1.0), Some(9.0));
    }

    #[test]
    fn population_std_of_constant_is_zero() {
        let v = [5.0; 8];
        let m = mean(&v).unwrap();
        assert_eq!(population_std(&v, m), 0.0);
    }
}
