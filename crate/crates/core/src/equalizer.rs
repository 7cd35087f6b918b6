//! Learnable front end: two residual Conv1D blocks over the I/Q channels,
//! DC removal, fixed matched filter, decimation, unit-power normalization
//! and conversion to a point set.

use crate::autodiff::{Bound, ParamSet, Real, Tape, Tensor, Var};
use crate::dsp::PulseShape;
use crate::rng::Stream;
use crate::{Error, Result};
use num_complex::Complex64;
use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct EqualizerConfig {
    pub kernel_size: usize,
    pub blocks: usize,
    /// Half-width of the uniform perturbation added to the first conv's delta init.
    pub init_noise: f64,
}

impl Default for EqualizerConfig {
    fn default() -> Self {
        EqualizerConfig {
            kernel_size: 65,
            blocks: 2,
            init_noise: 1e-3,
        }
    }
}

/// I/Q channel count; every conv layer maps 2 channels to 2 channels.
pub const CHANNELS: usize = 2;

/// Equalizer structure plus the fixed matched-filter kernel.
#[derive(Clone, Debug)]
pub struct Equalizer {
    pub config: EqualizerConfig,
    sps: usize,
    /// `[2, 2, taps]`, diagonal, scaled by 1/√sps.
    matched: Tensor<f64>,
}

/// `[2, len]` tensor with I in row 0 and Q in row 1.
pub fn signal_tensor<T: Real>(samples: &[Complex64]) -> Tensor<T> {
    let n = samples.len();
    Tensor::from_fn(&[CHANNELS, n], |k| {
        let s = samples[k % n];
        T::c(if k < n { s.re } else { s.im })
    })
}

/// Points `[n, 2]` back to a list of `[re, im]`.
pub fn points_from_tensor<T: Real>(t: &Tensor<T>) -> Vec<[f64; 2]> {
    t.data().chunks_exact(2).map(|p| [p[0].as_f64(), p[1].as_f64()]).collect()
}

fn conv_name(block: usize, layer: usize, part: &str) -> String {
    format!("rb{block}.conv{layer}.{part}")
}

impl Equalizer {
    pub fn new(config: EqualizerConfig, ps: &PulseShape) -> Result<Self> {
        if config.kernel_size.is_multiple_of(2) {
            return Err(Error::invalid(format!("kernel size {} must be odd", config.kernel_size)));
        }
        let k = ps.taps.len();
        let gain = 1.0 / (ps.sps as f64).sqrt();
        let mut matched = Tensor::zeros(&[CHANNELS, CHANNELS, k]);
        for c in 0..CHANNELS {
            for (j, t) in ps.taps.iter().enumerate() {
                // cross-correlation with the flipped taps; RRC taps are symmetric
                matched.data_mut()[(c * CHANNELS + c) * k + j] = t * gain;
            }
        }
        Ok(Equalizer {
            config,
            sps: ps.sps,
            matched,
        })
    }

    pub fn sps(&self) -> usize {
        self.sps
    }

    /// First conv of each block is a centered delta plus small uniform noise;
    /// the second conv is zero, so every block starts as the identity.
    pub fn init_params<T: Real>(&self, rng: &mut Stream) -> ParamSet<T> {
        let k = self.config.kernel_size;
        let center = k / 2;
        let mut p = ParamSet::new();
        for b in 0..self.config.blocks {
            let noise = self.config.init_noise;
            let w0 = Tensor::from_fn(&[CHANNELS, CHANNELS, k], |idx| {
                let (o, i, j) = (idx / (CHANNELS * k), (idx / k) % CHANNELS, idx % k);
                let delta = if o == i && j == center { 1.0 } else { 0.0 };
                T::c(delta + if noise > 0.0 { rng.random_range(-noise..noise) } else { 0.0 })
            });
            p.insert(conv_name(b, 0, "w"), w0);
            p.insert(conv_name(b, 0, "b"), Tensor::zeros(&[CHANNELS]));
            p.insert(conv_name(b, 1, "w"), Tensor::zeros(&[CHANNELS, CHANNELS, k]));
            p.insert(conv_name(b, 1, "b"), Tensor::zeros(&[CHANNELS]));
        }
        p
    }

    /// `x + conv1(relu(conv0(x)))`.
    pub fn residual_block<T: Real>(&self, tape: &mut Tape<T>, params: &Bound, block: usize, x: Var) -> Result<Var> {
        check_channels(tape, x)?;
        let h = tape.conv1d(x, params.var(&conv_name(block, 0, "w")), Some(params.var(&conv_name(block, 0, "b"))))?;
        let h = tape.relu(h)?;
        let h = tape.conv1d(h, params.var(&conv_name(block, 1, "w")), Some(params.var(&conv_name(block, 1, "b"))))?;
        tape.add(x, h)
    }

    /// Equalizer forward pass from a `[2, len]` signal to `[len / sps, 2]`
    /// unit-power points. `params = None` skips the residual blocks and
    /// leaves the classical front end.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, params: Option<&Bound>, y: Var) -> Result<Var> {
        check_channels(tape, y)?;
        let len = tape.value(y).shape()[1];
        if !len.is_multiple_of(self.sps) {
            return Err(Error::invalid(format!(
                "frame length {len} is not a multiple of {} samples per symbol",
                self.sps
            )));
        }
        let mut x = y;
        if let Some(p) = params {
            for b in 0..self.config.blocks {
                x = self.residual_block(tape, p, b, x)?;
            }
        }
        let x = zero_mean(tape, x)?;
        let mf = tape.constant(self.matched.cast())?;
        let x = tape.conv1d(x, mf, None)?;
        let x = tape.downsample(x, self.sps, 0)?;
        let x = unit_power(tape, x)?;
        tape.transpose(x)
    }

    /// Convenience wrapper: equalize complex samples without keeping the tape.
    pub fn equalize<T: Real>(&self, params: Option<&ParamSet<T>>, samples: &[Complex64]) -> Result<Vec<[f64; 2]>> {
        let mut tape = Tape::new();
        let bound = params.map(|p| p.bind(&mut tape, false)).transpose()?;
        let y = tape.constant(signal_tensor::<T>(samples))?;
        let z = self.forward(&mut tape, bound.as_ref(), y)?;
        Ok(points_from_tensor(tape.value(z)))
    }
}

fn check_channels<T: Real>(tape: &Tape<T>, x: Var) -> Result<()> {
    let shape = tape.value(x).shape();
    if shape.len() != 2 || shape[0] != CHANNELS {
        return Err(Error::shape("equalizer", format!("expected [2, len], got {shape:?}")));
    }
    Ok(())
}

/// Subtracts the per-channel mean of a `[channels, len]` tensor.
pub fn zero_mean<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let m = tape.mean_last(x)?;
    let neg = tape.scale(m, -1.0)?;
    tape.add_bcast(x, neg)
}

/// Scales a `[2, n]` I/Q tensor so that the mean of |z|² over the n symbols is 1.
pub fn unit_power<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let sq = tape.square(x)?;
    let m = tape.mean(sq)?;
    let p = tape.scale(m, CHANNELS as f64)?;
    let r = tape.rsqrt(p)?;
    tape.mul_bcast(x, r)
}
