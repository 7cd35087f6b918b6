//! Modulation alphabets, pulse shaping and receive-side primitives.

mod constellation;
mod pulse;

pub use constellation::{constellation_points, modulate, reference_r2, ConstellationSpec, ModulationType};
pub use pulse::{matched_filter_decimate, pulse_shape, rrc_taps, PulseShape};

use crate::{Error, Result};
use num_complex::Complex64;

/// Mean of |x|² over the sequence (0 for an empty sequence).
pub fn mean_power(x: &[Complex64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|v| v.norm_sqr()).sum::<f64>() / x.len() as f64
}

/// Scales `x` to unit mean power.
pub fn unit_power_normalize(x: &[Complex64]) -> Result<Vec<Complex64>> {
    let p = mean_power(x);
    if !(p > 0.0) || !p.is_finite() {
        return Err(Error::invalid("cannot normalize a zero-power sequence"));
    }
    let s = 1.0 / p.sqrt();
    Ok(x.iter().map(|v| v * s).collect())
}

/// Subtracts the complex mean (DC offset).
pub fn remove_mean(x: &[Complex64]) -> Vec<Complex64> {
    if x.is_empty() {
        return Vec::new();
    }
    let m = x.iter().sum::<Complex64>() / x.len() as f64;
    x.iter().map(|v| v - m).collect()
}

/// Reinterprets complex symbols as 2-D points `[re, im]`.
pub fn sig2con(s: &[Complex64]) -> Vec<[f64; 2]> {
    s.iter().map(|v| [v.re, v.im]).collect()
}

/// Inverse of [`sig2con`].
pub fn con2sig(p: &[[f64; 2]]) -> Vec<Complex64> {
    p.iter().map(|&[re, im]| Complex64::new(re, im)).collect()
}

/// Classical receiver front end: DC removal, matched filter, decimation,
/// unit-power normalization. This is the learned equalizer with identity
/// residual blocks.
pub fn front_end(y: &[Complex64], ps: &PulseShape) -> Result<Vec<Complex64>> {
    let centered = remove_mean(y);
    let symbols = matched_filter_decimate(&centered, ps)?;
    unit_power_normalize(&symbols)
}
