//! Channel impairments: quasi-static multipath fading, AWGN, phase offset
//! and receiver-side trimming.
//!
//! Fading is drawn once per frame. With a 4 Hz maximum Doppler shift a
//! frame of a few tens of milliseconds sees an essentially constant channel,
//! so no intra-frame time variation is modeled; `max_doppler` is carried for
//! bookkeeping only.

use crate::rng::Stream;
use crate::{Error, Result};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use std::f64::consts::PI;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChannelKind {
    /// No fading; a uniform random phase offset per frame.
    AwgnPo = 0,
    Rician = 1,
    Rayleigh = 2,
}

impl ChannelKind {
    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ChannelKind::AwgnPo),
            1 => Some(ChannelKind::Rician),
            2 => Some(ChannelKind::Rayleigh),
            _ => None,
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn is_fading(self) -> bool {
        self != ChannelKind::AwgnPo
    }

    pub fn name(self) -> &'static str {
        match self {
            ChannelKind::AwgnPo => "awgn-po",
            ChannelKind::Rician => "rician",
            ChannelKind::Rayleigh => "rayleigh",
        }
    }
}

impl FromStr for ChannelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "awgn-po" | "awgn+po" | "awgnpo" => Ok(ChannelKind::AwgnPo),
            "rician" => Ok(ChannelKind::Rician),
            "rayleigh" => Ok(ChannelKind::Rayleigh),
            _ => Err(Error::invalid(format!("unknown channel kind {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelConfig {
    pub kind: ChannelKind,
    /// Hz.
    pub sample_rate: f64,
    /// Seconds, ascending.
    pub path_delays: Vec<f64>,
    /// Average path gains in dB.
    pub path_gains_db: Vec<f64>,
    /// Line-of-sight to scattered power ratio on the first path.
    pub k_factor: f64,
    /// Hz. Not used by the quasi-static model.
    pub max_doppler: f64,
    pub tap_count: usize,
}

impl ChannelConfig {
    /// Three-path profile at 200 kHz with 18 taps.
    pub fn standard(kind: ChannelKind) -> Self {
        ChannelConfig {
            kind,
            sample_rate: 200e3,
            path_delays: vec![0.0, 9e-6, 17e-6],
            path_gains_db: vec![0.0, -2.0, -10.0],
            k_factor: if kind == ChannelKind::Rician { 4.0 } else { 0.0 },
            max_doppler: 4.0,
            tap_count: 18,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate > 0.0) {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if self.path_delays.is_empty() || self.path_delays.len() != self.path_gains_db.len() {
            return Err(Error::invalid("path delays and gains must be non-empty and of equal length"));
        }
        if self.path_delays[0] < 0.0 || self.path_delays.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::invalid("path delays must be non-negative and ascending"));
        }
        if !(self.k_factor >= 0.0) {
            return Err(Error::invalid("K-factor must be non-negative"));
        }
        if self.kind.is_fading() && self.tap_count < self.max_delay_samples().ceil() as usize + 3 {
            return Err(Error::invalid(format!(
                "{} taps cannot hold a {:.2}-sample delay spread",
                self.tap_count,
                self.max_delay_samples()
            )));
        }
        Ok(())
    }

    /// Path delays in samples.
    pub fn delays_samples(&self) -> Vec<f64> {
        self.path_delays.iter().map(|d| d * self.sample_rate).collect()
    }

    pub fn max_delay_samples(&self) -> f64 {
        self.path_delays.last().copied().unwrap_or(0.0) * self.sample_rate
    }

    /// Tap index at which the zero-delay path is centered.
    pub fn bulk_delay(&self) -> usize {
        if !self.kind.is_fading() {
            return 0;
        }
        let spread = self.max_delay_samples().ceil() as usize;
        (self.tap_count - 1 - spread) / 2
    }

    /// Linear path powers normalized to sum to 1.
    pub fn path_powers(&self) -> Vec<f64> {
        let lin: Vec<f64> = self.path_gains_db.iter().map(|g| 10f64.powf(g / 10.0)).collect();
        let total: f64 = lin.iter().sum();
        lin.iter().map(|p| p / total).collect()
    }

    /// Unit-energy Hann-windowed sinc interpolator for each path.
    pub fn interpolation_filters(&self) -> Vec<Vec<f64>> {
        let c0 = self.bulk_delay() as f64;
        let half = c0 + 1.0;
        self.delays_samples()
            .iter()
            .map(|&tau| {
                let pos = c0 + tau;
                let mut f: Vec<f64> = (0..self.tap_count)
                    .map(|k| {
                        let u = k as f64 - pos;
                        if u.abs() >= half {
                            return 0.0;
                        }
                        let w = (PI * u / (2.0 * half)).cos().powi(2);
                        let sinc = if u.abs() < 1e-12 { 1.0 } else { (PI * u).sin() / (PI * u) };
                        w * sinc
                    })
                    .collect();
                let e = f.iter().map(|v| v * v).sum::<f64>().sqrt();
                f.iter_mut().for_each(|v| *v /= e);
                f
            })
            .collect()
    }
}

/// Channel impulse response for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FadingRealization {
    pub taps: Vec<Complex64>,
}

fn complex_gaussian(rng: &mut Stream, variance: f64) -> Complex64 {
    let s = (variance / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re * s, im * s)
}

/// Draws one complex gain per path. The first path carries a line-of-sight
/// component of power ratio `k_factor` (initial phase 0); the expected total
/// power is 1.
pub fn draw_path_gains(cfg: &ChannelConfig, rng: &mut Stream) -> Vec<Complex64> {
    let k = cfg.k_factor;
    cfg.path_powers()
        .iter()
        .enumerate()
        .map(|(p, &power)| {
            let scatter = complex_gaussian(rng, 1.0);
            let g = if p == 0 && k > 0.0 {
                Complex64::new((k / (k + 1.0)).sqrt(), 0.0) + scatter * (1.0 / (k + 1.0)).sqrt()
            } else {
                scatter
            };
            g * power.sqrt()
        })
        .collect()
}

pub fn realize_fading(cfg: &ChannelConfig, rng: &mut Stream) -> Result<FadingRealization> {
    if !cfg.kind.is_fading() {
        return Err(Error::invalid("AWGN+PO channels have no fading taps"));
    }
    cfg.validate()?;
    let gains = draw_path_gains(cfg, rng);
    let filters = cfg.interpolation_filters();
    let mut taps = vec![Complex64::new(0.0, 0.0); cfg.tap_count];
    for (g, f) in gains.iter().zip(&filters) {
        for (t, &v) in taps.iter_mut().zip(f) {
            *t += g * v;
        }
    }
    Ok(FadingRealization { taps })
}

/// Full linear convolution; output length `x.len() + taps.len() - 1`.
pub fn apply_multipath(x: &[Complex64], h: &FadingRealization) -> Result<Vec<Complex64>> {
    if x.is_empty() {
        return Err(Error::invalid("cannot filter an empty sequence"));
    }
    let mut y = vec![Complex64::new(0.0, 0.0); x.len() + h.taps.len() - 1];
    for (k, &t) in h.taps.iter().enumerate() {
        if t == Complex64::new(0.0, 0.0) {
            continue;
        }
        for (yi, &xi) in y[k..k + x.len()].iter_mut().zip(x) {
            *yi += t * xi;
        }
    }
    Ok(y)
}

/// Noise variance giving `snr_db` relative to the measured power of `x`.
pub fn noise_variance(x: &[Complex64], snr_db: f64) -> f64 {
    crate::dsp::mean_power(x) / 10f64.powf(snr_db / 10.0)
}

/// Adds circularly-symmetric complex Gaussian noise at `snr_db` relative to
/// the measured power of `x`.
pub fn apply_awgn(x: &[Complex64], snr_db: f64, rng: &mut Stream) -> Result<Vec<Complex64>> {
    if !snr_db.is_finite() {
        return Err(Error::invalid(format!("SNR {snr_db} dB is not finite")));
    }
    let var = noise_variance(x, snr_db);
    Ok(x.iter().map(|&v| v + complex_gaussian(rng, var)).collect())
}

pub fn apply_phase_offset(x: &[Complex64], theta: f64) -> Vec<Complex64> {
    let r = Complex64::from_polar(1.0, theta);
    x.iter().map(|v| v * r).collect()
}

/// `y[discard .. discard + len]`.
pub fn trim_transient(y: &[Complex64], len: usize, discard: usize) -> Result<Vec<Complex64>> {
    if y.len() < discard + len {
        return Err(Error::invalid(format!(
            "{} samples cannot supply {len} after discarding {discard}",
            y.len()
        )));
    }
    Ok(y[discard..discard + len].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn ramp(n: usize) -> Vec<Complex64> {
        (0..n).map(|i| Complex64::new(i as f64 * 0.1, -(i as f64).sin())).collect()
    }

    #[test]
    fn standard_profile_maps_into_18_taps() {
        let cfg = ChannelConfig::standard(ChannelKind::Rayleigh);
        cfg.validate().unwrap();
        let d = cfg.delays_samples();
        assert!((d[1] - 1.8).abs() < 1e-9 && (d[2] - 3.4).abs() < 1e-9);
        let h = realize_fading(&cfg, &mut substream(1, &[])).unwrap();
        assert_eq!(h.taps.len(), 18);
        assert!(h.taps.iter().all(|t| t.re.is_finite() && t.im.is_finite()));
        for f in cfg.interpolation_filters() {
            assert!((f.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_k_matches_rayleigh_stream() {
        let mut ric = ChannelConfig::standard(ChannelKind::Rician);
        ric.k_factor = 0.0;
        let ray = ChannelConfig::standard(ChannelKind::Rayleigh);
        let a = realize_fading(&ric, &mut substream(5, &[])).unwrap();
        let b = realize_fading(&ray, &mut substream(5, &[])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn awgn_po_has_no_taps() {
        let cfg = ChannelConfig::standard(ChannelKind::AwgnPo);
        assert!(realize_fading(&cfg, &mut substream(1, &[])).is_err());
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = ChannelConfig::standard(ChannelKind::Rayleigh);
        cfg.path_delays = vec![0.0, 17e-6, 9e-6];
        assert!(cfg.validate().is_err());
        let mut cfg = ChannelConfig::standard(ChannelKind::Rayleigh);
        cfg.tap_count = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = ChannelConfig::standard(ChannelKind::Rician);
        cfg.k_factor = -1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn multipath_identity_and_lengths() {
        let x = ramp(40);
        let mut taps = vec![Complex64::new(0.0, 0.0); 18];
        taps[0] = Complex64::new(1.0, 0.0);
        let y = apply_multipath(&x, &FadingRealization { taps }).unwrap();
        assert_eq!(y.len(), 57);
        assert_eq!(&y[..40], &x[..]);
        assert!(y[40..].iter().all(|v| v.norm() == 0.0));

        let cfg = ChannelConfig::standard(ChannelKind::Rician);
        let h = realize_fading(&cfg, &mut substream(2, &[])).unwrap();
        let long = vec![Complex64::new(1.0, 0.0); 16_384];
        assert_eq!(apply_multipath(&long, &h).unwrap().len(), 16_401);

        let a = Complex64::new(0.3, -1.2);
        let xa: Vec<Complex64> = x.iter().map(|v| v * a).collect();
        let y1 = apply_multipath(&xa, &h).unwrap();
        let y2 = apply_multipath(&x, &h).unwrap();
        for (p, q) in y1.iter().zip(&y2) {
            assert!((p - q * a).norm() < 1e-12);
        }
        assert!(apply_multipath(&[], &h).is_err());
    }

    #[test]
    fn noise_variance_definition() {
        let x = vec![Complex64::new(1.0, 0.0); 16];
        assert!((noise_variance(&x, 0.0) - 1.0).abs() < 1e-15);
        assert!((noise_variance(&x, 30.0) - 1e-3).abs() < 1e-15);
        assert!(apply_awgn(&x, f64::NAN, &mut substream(0, &[])).is_err());
    }

    #[test]
    fn phase_offset_rotates() {
        let x = vec![Complex64::new(1.0, 0.0)];
        assert_eq!(apply_phase_offset(&x, 0.0), x);
        let y = apply_phase_offset(&x, PI / 2.0);
        assert!((y[0] - Complex64::new(0.0, 1.0)).norm() < 1e-15);
        let r = ramp(100);
        for (a, b) in r.iter().zip(apply_phase_offset(&r, 1.234)) {
            assert!((a.norm() - b.norm()).abs() < 1e-14);
        }
    }

    #[test]
    fn trim_examples() {
        let y = ramp(16_401);
        let t = trim_transient(&y, 8192, 49).unwrap();
        assert_eq!(t.len(), 8192);
        assert_eq!(t[0], y[49]);
        assert_eq!(trim_transient(&y, 10, 0).unwrap(), y[..10].to_vec());
        let n = crate::dsp::unit_power_normalize(&t).unwrap();
        assert!((crate::dsp::mean_power(&n) - 1.0).abs() < 1e-12);
        assert!(trim_transient(&y, 16_401, 1).is_err());
    }
}
