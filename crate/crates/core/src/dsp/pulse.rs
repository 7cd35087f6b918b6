use crate::{Error, Result};
use num_complex::Complex64;
use std::f64::consts::PI;

/// Root-raised-cosine transmit/receive pulse.
#[derive(Clone, Debug, PartialEq)]
pub struct PulseShape {
    pub rolloff: f64,
    pub span_symbols: usize,
    /// Samples per symbol (the upsampling and decimation factor).
    pub sps: usize,
    /// Unit-energy taps, `span_symbols * sps + 1` of them.
    pub taps: Vec<f64>,
}

impl PulseShape {
    pub fn new(rolloff: f64, span_symbols: usize, sps: usize) -> Result<Self> {
        rrc_taps(rolloff, span_symbols, sps)
    }

    /// Index of the center tap; the group delay of one filter in samples.
    pub fn group_delay(&self) -> usize {
        self.taps.len() / 2
    }

    /// Power of the transmit/receive cascade at nonzero symbol offsets,
    /// relative to its center power: the self-interference a matched filter
    /// leaves on unit-power symbols when the pulse is truncated.
    pub fn residual_isi(&self) -> f64 {
        let n = self.taps.len();
        let rc = |lag: usize| -> f64 { (0..n - lag).map(|i| self.taps[i] * self.taps[i + lag]).sum() };
        let center = rc(0);
        let off: f64 = (1..)
            .map(|k| k * self.sps)
            .take_while(|&lag| lag < n)
            .map(|lag| rc(lag).powi(2))
            .sum();
        2.0 * off / (center * center)
    }
}

/// RRC impulse response at `t` symbol periods.
fn rrc_value(t: f64, beta: f64) -> f64 {
    const EPS: f64 = 1e-9;
    if t.abs() < EPS {
        return 1.0 - beta + 4.0 * beta / PI;
    }
    if (t.abs() - 1.0 / (4.0 * beta)).abs() < EPS {
        let a = PI / (4.0 * beta);
        return beta / 2f64.sqrt() * ((1.0 + 2.0 / PI) * a.sin() + (1.0 - 2.0 / PI) * a.cos());
    }
    let num = (PI * t * (1.0 - beta)).sin() + 4.0 * beta * t * (PI * t * (1.0 + beta)).cos();
    let den = PI * t * (1.0 - (4.0 * beta * t).powi(2));
    num / den
}

/// Unit-energy RRC taps spanning `span_symbols` symbols at `sps` samples per symbol.
pub fn rrc_taps(rolloff: f64, span_symbols: usize, sps: usize) -> Result<PulseShape> {
    if !(rolloff > 0.0 && rolloff <= 1.0) {
        return Err(Error::invalid(format!("roll-off {rolloff} outside (0, 1]")));
    }
    if span_symbols == 0 || !span_symbols.is_multiple_of(2) {
        return Err(Error::invalid(format!("span {span_symbols} must be even and positive")));
    }
    if sps == 0 {
        return Err(Error::invalid("samples per symbol must be at least 1"));
    }
    let n = span_symbols * sps + 1;
    let center = (n / 2) as f64;
    let mut taps: Vec<f64> = (0..n)
        .map(|k| rrc_value((k as f64 - center) / sps as f64, rolloff))
        .collect();
    let energy = taps.iter().map(|t| t * t).sum::<f64>().sqrt();
    taps.iter_mut().for_each(|t| *t /= energy);
    Ok(PulseShape {
        rolloff,
        span_symbols,
        sps,
        taps,
    })
}

/// Centered ("same") convolution of a complex sequence with real taps.
pub(crate) fn convolve_same(x: &[Complex64], taps: &[f64]) -> Vec<Complex64> {
    let half = taps.len() / 2;
    let n = x.len();
    let mut out = vec![Complex64::new(0.0, 0.0); n];
    for (j, o) in out.iter_mut().enumerate() {
        // out[j] = sum_k taps[k] * x[j + half - k]
        let k_lo = (j + half + 1).saturating_sub(n);
        let k_hi = (j + half).min(taps.len() - 1);
        let mut acc = Complex64::new(0.0, 0.0);
        for k in k_lo..=k_hi {
            acc += x[j + half - k] * taps[k];
        }
        *o = acc;
    }
    out
}

/// Zero-stuffs by `sps` and filters with the pulse. The output carries
/// the symbol power: taps are scaled by √sps so a unit-power symbol
/// stream yields unit-power samples. Output length is `symbols.len() * sps`.
pub fn pulse_shape(symbols: &[Complex64], ps: &PulseShape) -> Result<Vec<Complex64>> {
    if symbols.is_empty() {
        return Err(Error::invalid("cannot pulse-shape an empty symbol sequence"));
    }
    let mut up = vec![Complex64::new(0.0, 0.0); symbols.len() * ps.sps];
    for (i, s) in symbols.iter().enumerate() {
        up[i * ps.sps] = *s;
    }
    let gain = (ps.sps as f64).sqrt();
    let taps: Vec<f64> = ps.taps.iter().map(|t| t * gain).collect();
    Ok(convolve_same(&up, &taps))
}

/// Matched filter followed by decimation by `sps`.
///
/// Both filters are applied in centered form, so their combined group delay
/// is already compensated and symbol `k` sits at sample `k * sps`. The
/// filter is scaled by 1/√sps so that `matched_filter_decimate(pulse_shape(s))`
/// recovers `s` up to truncation ISI.
pub fn matched_filter_decimate(x: &[Complex64], ps: &PulseShape) -> Result<Vec<Complex64>> {
    if !x.len().is_multiple_of(ps.sps) {
        return Err(Error::invalid(format!(
            "length {} is not a multiple of {} samples per symbol",
            x.len(),
            ps.sps
        )));
    }
    let gain = 1.0 / (ps.sps as f64).sqrt();
    let taps: Vec<f64> = ps.taps.iter().map(|t| t * gain).collect();
    let filtered = convolve_same(x, &taps);
    Ok(filtered.into_iter().step_by(ps.sps).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{modulate, ModulationType};
    use rand::Rng;

    fn standard_pulse() -> PulseShape {
        rrc_taps(0.35, 4, 8).unwrap()
    }

    #[test]
    fn tap_count_symmetry_energy() {
        let ps = standard_pulse();
        assert_eq!(ps.taps.len(), 33);
        for k in 0..ps.taps.len() {
            assert_eq!(ps.taps[k], ps.taps[ps.taps.len() - 1 - k]);
        }
        let e: f64 = ps.taps.iter().map(|t| t * t).sum();
        assert!((e - 1.0).abs() < 1e-12);
        let c = ps.taps[ps.group_delay()];
        assert!(ps.taps.iter().all(|&t| t <= c));
    }

    #[test]
    fn singular_points_are_finite() {
        // beta = 0.25 puts t = 1/(4 beta) = 1 symbol exactly on the grid
        let ps = rrc_taps(0.25, 6, 4).unwrap();
        assert!(ps.taps.iter().all(|t| t.is_finite()));
        let limit = rrc_value(1.0, 0.25);
        let near = rrc_value(1.0 + 1e-6, 0.25);
        assert!((limit - near).abs() < 1e-5);
        let near0 = rrc_value(1e-7, 0.25);
        assert!((rrc_value(0.0, 0.25) - near0).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(rrc_taps(0.0, 4, 8).is_err());
        assert!(rrc_taps(1.5, 4, 8).is_err());
        assert!(rrc_taps(0.35, 3, 8).is_err());
        assert!(rrc_taps(0.35, 4, 0).is_err());
    }

    /// Symbol-spaced samples of the cascade RRC*RRC, by direct full convolution.
    fn cascade_at_symbols(ps: &PulseShape) -> (f64, Vec<f64>) {
        let n = ps.taps.len();
        let mut rc = vec![0.0; 2 * n - 1];
        for i in 0..n {
            for j in 0..n {
                rc[i + j] += ps.taps[i] * ps.taps[j];
            }
        }
        let center = n - 1;
        assert!(rc.iter().all(|&v| v <= rc[center] + 1e-15));
        let off = (1..=ps.span_symbols)
            .flat_map(|k| [rc[center + k * ps.sps], rc[center - k * ps.sps]])
            .collect();
        (rc[center], off)
    }

    #[test]
    fn cascade_is_nearly_nyquist() {
        // a 4-symbol span leaves ~4.8% ISI at +-2 symbols; 6 symbols is below 1%
        let (peak, off) = cascade_at_symbols(&rrc_taps(0.35, 6, 8).unwrap());
        assert!(off.iter().all(|v| v.abs() < 1e-2 * peak), "{off:?}");
        let (peak, off) = cascade_at_symbols(&standard_pulse());
        assert!((peak - 1.0).abs() < 1e-12);
        assert!(off.iter().all(|v| v.abs() < 5e-2 * peak), "{off:?}");
        let isi = off.iter().map(|v| v * v).sum::<f64>() / (peak * peak);
        assert!((standard_pulse().residual_isi() - isi).abs() < 1e-15);
    }

    #[test]
    fn impulse_response_and_lengths() {
        let ps = standard_pulse();
        let mut sym = vec![Complex64::new(0.0, 0.0); 9];
        sym[4] = Complex64::new(1.0, 0.0);
        let x = pulse_shape(&sym, &ps).unwrap();
        let g = (ps.sps as f64).sqrt();
        let c = 4 * ps.sps;
        for (k, t) in ps.taps.iter().enumerate() {
            let idx = c + k - ps.group_delay();
            assert!((x[idx].re - g * t).abs() < 1e-15);
        }
        let s = vec![Complex64::new(1.0, 0.0); 2048];
        assert_eq!(pulse_shape(&s, &ps).unwrap().len(), 16_384);
        assert!(pulse_shape(&[], &ps).is_err());
    }

    #[test]
    fn pulse_shaped_power_matches_symbol_power() {
        let ps = standard_pulse();
        let mut rng = crate::rng::substream(3, &[]);
        let bits: Vec<u8> = (0..2 * 20_000).map(|_| rng.random_range(0..2u8)).collect();
        let s = modulate(&bits, ModulationType::Qpsk).unwrap();
        let x = pulse_shape(&s, &ps).unwrap();
        let mid = &x[1024..x.len() - 1024];
        let p = mid.iter().map(|v| v.norm_sqr()).sum::<f64>() / mid.len() as f64;
        assert!((p - 1.0).abs() < 0.02, "{p}");
    }

    fn loopback_max_error(ps: &PulseShape) -> f64 {
        let mut rng = crate::rng::substream(4, &[]);
        let bits: Vec<u8> = (0..2 * 1024).map(|_| rng.random_range(0..2u8)).collect();
        let s = modulate(&bits, ModulationType::Qpsk).unwrap();
        let x = pulse_shape(&s, ps).unwrap();
        let r = matched_filter_decimate(&x, ps).unwrap();
        assert_eq!(r.len(), s.len());
        let edge = ps.span_symbols * 2;
        (edge..s.len() - edge).map(|k| (r[k] - s[k]).norm()).fold(0.0, f64::max)
    }

    #[test]
    fn loopback_recovers_symbols() {
        let long = rrc_taps(0.35, 6, 8).unwrap();
        assert!(loopback_max_error(&long) < 1e-2);
        // span 4: error bounded by the summed cascade ISI (triangle inequality, |s| = 1)
        let ps = standard_pulse();
        let (_, off) = cascade_at_symbols(&ps);
        let bound: f64 = off.iter().map(|v| v.abs()).sum();
        let err = loopback_max_error(&ps);
        assert!(err <= bound + 1e-9, "{err} > {bound}");
    }

    #[test]
    fn matched_filter_lengths_and_linearity() {
        let ps = standard_pulse();
        let zeros = vec![Complex64::new(0.0, 0.0); 8192];
        let r = matched_filter_decimate(&zeros, &ps).unwrap();
        assert_eq!(r.len(), 1024);
        assert!(r.iter().all(|v| v.norm() == 0.0));
        assert!(matched_filter_decimate(&zeros[..8191], &ps).is_err());
    }
}
