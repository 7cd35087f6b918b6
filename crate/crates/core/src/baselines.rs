//! Classical references: a CMA blind equalizer, a maximum-likelihood
//! constellation classifier, higher-order-cumulant features with a small
//! MLP, and the CMA-for-equalizer ablation.

use crate::autodiff::{AdamState, ParamSet, Tape, Tensor};
use crate::dataset::{Dataset, Splits};
use crate::dsp::{constellation_points, front_end, reference_r2, sig2con, unit_power_normalize, ModulationType, PulseShape};
use crate::parallel::Execution;
use crate::rng::{substream, tag};
use crate::training::{classify_points, optimize, EpochRecord, Evaluation, LoopData, Model, ModelParams, PhaseConfig};
use crate::{Error, Result};
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct CmaConfig {
    pub filter_length: usize,
    pub step_size: f64,
    /// Passes over the input sequence.
    pub iterations: usize,
    pub r2: f64,
    /// Largest tap magnitude tolerated before declaring divergence.
    pub divergence_bound: f64,
}

impl Default for CmaConfig {
    fn default() -> Self {
        CmaConfig {
            filter_length: 31,
            step_size: 1e-3,
            iterations: 3,
            r2: 1.0,
            divergence_bound: 1e3,
        }
    }
}

impl CmaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.filter_length.is_multiple_of(2) {
            return Err(Error::invalid(format!("CMA filter length {} must be odd", self.filter_length)));
        }
        if !(self.step_size > 0.0) || self.iterations == 0 || !(self.r2 > 0.0) || !(self.divergence_bound > 0.0) {
            return Err(Error::invalid(format!("invalid CMA configuration {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct CmaResult {
    /// Input filtered with the final taps, same length as the input.
    pub output: Vec<Complex64>,
    pub taps: Vec<Complex64>,
    /// `(|z|² - r2)²` of every adaptation step, across all passes.
    pub dispersion: Vec<f64>,
}

/// `Σ_k w_k y[n + c - k]` with `c` the center tap; samples outside the input are zero.
fn fir_at(y: &[Complex64], w: &[Complex64], n: usize) -> Complex64 {
    let c = w.len() / 2;
    let mut z = Complex64::new(0.0, 0.0);
    for (k, wk) in w.iter().enumerate() {
        if let Some(j) = (n + c).checked_sub(k) {
            if j < y.len() {
                z += wk * y[j];
            }
        }
    }
    z
}

/// Symbol-spaced constant modulus algorithm with a center-spike start:
/// per sample `z = wᵀy`, `e = z(|z|² - r2)`, `w ← w - µ e conj(y)`.
pub fn cma_equalize(y: &[Complex64], cfg: &CmaConfig) -> Result<CmaResult> {
    cfg.validate()?;
    if y.len() <= cfg.filter_length {
        return Err(Error::invalid(format!(
            "CMA needs more than {} samples, got {}",
            cfg.filter_length,
            y.len()
        )));
    }
    let l = cfg.filter_length;
    let c = l / 2;
    let mut w = vec![Complex64::new(0.0, 0.0); l];
    w[c] = Complex64::new(1.0, 0.0);
    let mut dispersion = Vec::with_capacity(cfg.iterations * y.len());
    let mut step = 0usize;
    for _ in 0..cfg.iterations {
        for n in 0..y.len() {
            let z = fir_at(y, &w, n);
            let m = z.norm_sqr() - cfg.r2;
            dispersion.push(m * m);
            let e = z * m;
            for (k, wk) in w.iter_mut().enumerate() {
                if let Some(j) = (n + c).checked_sub(k) {
                    if j < y.len() {
                        *wk -= cfg.step_size * e * y[j].conj();
                    }
                }
            }
            if w.iter().any(|t| !t.norm().is_finite() || t.norm() > cfg.divergence_bound) {
                return Err(Error::Diverged { iteration: step });
            }
            step += 1;
        }
    }
    let output = (0..y.len()).map(|n| fir_at(y, &w, n)).collect();
    Ok(CmaResult {
        output,
        taps: w,
        dispersion,
    })
}

/// Mean of `(|z|² - r2)²`.
pub fn dispersion(z: &[Complex64], r2: f64) -> f64 {
    z.iter().map(|s| (s.norm_sqr() - r2).powi(2)).sum::<f64>() / z.len().max(1) as f64
}

/// Uniform phases tried by the ML classifier.
pub const ML_PHASES: usize = 180;

/// Signal-to-noise ratio of matched-filtered symbols for a sample-rate SNR:
/// the matched filter keeps the signal and passes `1/sps` of white noise.
pub fn symbol_snr_db(sample_snr_db: f64, sps: usize) -> f64 {
    sample_snr_db + 10.0 * (sps as f64).log10()
}

/// Symbol SNR after the matched filter counting the residual ISI of a
/// truncated pulse as additional Gaussian noise. A span-4 pulse caps this
/// near 22 dB however clean the channel.
pub fn effective_symbol_snr_db(sample_snr_db: f64, ps: &PulseShape) -> f64 {
    let noise = 10f64.powf(-symbol_snr_db(sample_snr_db, ps.sps) / 10.0) + ps.residual_isi();
    -10.0 * noise.log10()
}

/// Log-likelihood of unit-power `points` under a rotated, noisy candidate.
/// The received power 1 splits into `1 - σ²` signal and `σ² = 1/(1 + snr)` noise.
fn log_likelihood(points: &[Complex64], alphabet: &[Complex64], rot: Complex64, sigma2: f64) -> f64 {
    let a = (1.0 - sigma2).sqrt();
    let refs: Vec<Complex64> = alphabet.iter().map(|s| s * rot * a).collect();
    let ln_m = (alphabet.len() as f64).ln();
    let norm = -(std::f64::consts::PI * sigma2).ln();
    // terms this far below the best contribute below f64 resolution
    const CUTOFF: f64 = 40.0;
    let mut total = 0.0;
    let mut d2 = vec![0.0; refs.len()];
    for p in points {
        let mut best = f64::INFINITY;
        for (d, r) in d2.iter_mut().zip(&refs) {
            *d = (p - r).norm_sqr() / sigma2;
            best = best.min(*d);
        }
        let mut s = 0.0;
        for &d in &d2 {
            let x = d - best;
            if x < CUTOFF {
                s += (-x).exp();
            }
        }
        total += norm - best + s.ln() - ln_m;
    }
    total
}

/// Maximum-likelihood classification of a unit-power symbol set over
/// candidates and a uniform phase grid. `snr_db` is the SNR of the symbols.
/// Ties go to the lower modulation order.
pub fn ml_classify(points: &[Complex64], snr_db: f64, candidates: &[ModulationType]) -> Result<ModulationType> {
    if candidates.is_empty() {
        return Err(Error::invalid("no ML candidates"));
    }
    if points.is_empty() || !snr_db.is_finite() {
        return Err(Error::invalid("ML needs points and a finite SNR"));
    }
    let mut ordered = candidates.to_vec();
    ordered.sort_by_key(|m| (m.order(), m.index()));
    let sigma2 = 1.0 / (1.0 + 10f64.powf(snr_db / 10.0));
    let mut best: Option<(f64, ModulationType)> = None;
    for mt in ordered {
        let alphabet = constellation_points(mt).points;
        let sym = mt.rotational_symmetry();
        // The likelihood repeats every 2π/sym, so the full grid reduces to the
        // distinct residues of its phases within one sector.
        let units = ML_PHASES * sym;
        let mut residues: Vec<usize> = (0..ML_PHASES).map(|j| (j * sym) % ML_PHASES).collect();
        residues.sort_unstable();
        residues.dedup();
        for r in residues {
            let theta = std::f64::consts::TAU * r as f64 / units as f64;
            let ll = log_likelihood(points, &alphabet, Complex64::from_polar(1.0, theta), sigma2);
            if best.is_none_or(|(b, _)| ll > b) {
                best = Some((ll, mt));
            }
        }
    }
    Ok(best.expect("candidates are non-empty").1)
}

/// Normalized cumulant magnitudes
/// `[|C20|, C21, |C40|, |C41|, |C42|, |C60|, |C61|, |C62|, |C63|]`,
/// each `C_nk` divided by `C21^(n/2)` (C21 itself is reported raw).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HocFeatures(pub [f64; 9]);

/// Shortest sequence accepted by [`hoc_features`].
pub const HOC_MIN_LENGTH: usize = 100;

pub fn hoc_features(s: &[Complex64]) -> Result<HocFeatures> {
    if s.len() < HOC_MIN_LENGTH {
        return Err(Error::invalid(format!(
            "cumulants need at least {HOC_MIN_LENGTH} symbols, got {}",
            s.len()
        )));
    }
    let n = s.len() as f64;
    let m = |p: i32, q: i32| -> Complex64 { s.iter().map(|z| z.powi(p - q) * z.conj().powi(q)).sum::<Complex64>() / n };
    let (m20, m21, m22) = (m(2, 0), m(2, 1), m(2, 2));
    let (m40, m41, m42, m43) = (m(4, 0), m(4, 1), m(4, 2), m(4, 3));
    let (m60, m61, m62, m63) = (m(6, 0), m(6, 1), m(6, 2), m(6, 3));
    let c20 = m20;
    let c21 = m21;
    let c40 = m40 - 3.0 * m20 * m20;
    let c41 = m41 - 3.0 * m20 * m21;
    let c42 = m42 - m20.norm_sqr() - 2.0 * m21 * m21;
    let c60 = m60 - 15.0 * m40 * m20 + 30.0 * m20.powi(3);
    let c61 = m61 - 5.0 * m21 * m40 - 10.0 * m20 * m41 + 30.0 * m20 * m20 * m21;
    let c62 = m62 - 6.0 * m20 * m42 - 8.0 * m21 * m41 - m22 * m40 + 6.0 * m20 * m20 * m22 + 24.0 * m21 * m21 * m20;
    let c63 = m63 - 9.0 * m21 * m42 + 12.0 * m21.powi(3) - 3.0 * m20 * m43 - 3.0 * m22 * m41 + 18.0 * m20 * m21 * m22;
    let p = c21.re;
    if !(p > 0.0) {
        return Err(Error::invalid("cumulants of a zero-power sequence"));
    }
    let f = [
        c20.norm() / p,
        p,
        c40.norm() / p.powi(2),
        c41.norm() / p.powi(2),
        c42.norm() / p.powi(2),
        c60.norm() / p.powi(3),
        c61.norm() / p.powi(3),
        c62.norm() / p.powi(3),
        c63.norm() / p.powi(3),
    ];
    if f.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "hoc_features" });
    }
    Ok(HocFeatures(f))
}

#[derive(Clone, Debug, PartialEq)]
pub struct HocMlpConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for HocMlpConfig {
    fn default() -> Self {
        HocMlpConfig {
            hidden: 128,
            epochs: 100,
            batch_size: 32,
            lr: 1e-3,
        }
    }
}

/// Three-layer ReLU MLP over standardized cumulant features.
#[derive(Clone, Debug)]
pub struct HocMlp {
    pub params: ParamSet<f32>,
    pub classes: usize,
    pub mean: [f64; 9],
    pub std: [f64; 9],
}

const HOC_LAYERS: [&str; 3] = ["l0", "l1", "l2"];

impl HocMlp {
    /// Untrained network with identity standardization.
    pub fn new(hidden: usize, classes: usize, seed: u64) -> Self {
        let mut rng = substream(seed, &[tag("hoc.init")]);
        let dims = [9, hidden, hidden, classes];
        let mut params = ParamSet::new();
        for (l, name) in HOC_LAYERS.iter().enumerate() {
            let bound = 1.0 / (dims[l] as f64).sqrt();
            params.insert(
                format!("{name}.w"),
                Tensor::from_fn(&[dims[l], dims[l + 1]], |_| rng.random_range(-bound..bound) as f32),
            );
            params.insert(
                format!("{name}.b"),
                Tensor::from_fn(&[dims[l + 1]], |_| rng.random_range(-bound..bound) as f32),
            );
        }
        HocMlp {
            params,
            classes,
            mean: [0.0; 9],
            std: [1.0; 9],
        }
    }

    fn standardized(&self, feats: &[HocFeatures]) -> Tensor<f32> {
        Tensor::from_fn(&[feats.len(), 9], |k| {
            let (i, j) = (k / 9, k % 9);
            ((feats[i].0[j] - self.mean[j]) / self.std[j]) as f32
        })
    }

    fn forward(&self, tape: &mut Tape<f32>, trainable: bool, x: Tensor<f32>) -> Result<(crate::autodiff::Bound<'_>, crate::autodiff::Var)> {
        let b = self.params.bind(tape, trainable)?;
        let mut h = tape.constant(x)?;
        for (l, name) in HOC_LAYERS.iter().enumerate() {
            h = crate::classifier::linear(tape, &b, name, h)?;
            if l + 1 < HOC_LAYERS.len() {
                h = tape.relu(h)?;
            }
        }
        let probs = tape.softmax(h)?;
        Ok((b, probs))
    }

    pub fn predict(&self, feats: &[HocFeatures]) -> Result<Vec<usize>> {
        if feats.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let (_, probs) = self.forward(&mut tape, false, self.standardized(feats))?;
        let p = tape.value(probs);
        Ok((0..feats.len())
            .map(|i| {
                let row = p.row(i);
                (0..row.len()).fold(0, |b, c| if row[c] > row[b] { c } else { b })
            })
            .collect())
    }

    /// Fits feature standardization on the training set, then trains with
    /// Adam on mean cross-entropy. Returns the per-epoch mean loss.
    pub fn train(&mut self, feats: &[HocFeatures], labels: &[usize], cfg: &HocMlpConfig, seed: u64) -> Result<Vec<f64>> {
        if feats.is_empty() || feats.len() != labels.len() || labels.iter().any(|&l| l >= self.classes) {
            return Err(Error::invalid("HOC-MLP training needs matching, in-range features and labels"));
        }
        if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
            return Err(Error::invalid("HOC-MLP needs a positive batch size and learning rate"));
        }
        let n = feats.len() as f64;
        for j in 0..9 {
            let mean = feats.iter().map(|f| f.0[j]).sum::<f64>() / n;
            let var = feats.iter().map(|f| (f.0[j] - mean).powi(2)).sum::<f64>() / n;
            self.mean[j] = mean;
            // constant features (such as C21 of unit-power input) pass through centered
            self.std[j] = if var.sqrt() > 1e-9 { var.sqrt() } else { 1.0 };
        }
        let x = self.standardized(feats);
        let mut adam = AdamState::new(&self.params);
        let mut order: Vec<usize> = (0..feats.len()).collect();
        let mut losses = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut substream(seed, &[tag("hoc.shuffle"), epoch as u64]));
            let mut total = 0.0;
            for batch in order.chunks(cfg.batch_size) {
                let xb = Tensor::from_fn(&[batch.len(), 9], |k| x.data()[batch[k / 9] * 9 + k % 9]);
                let onehot = Tensor::from_fn(&[batch.len(), self.classes], |k| {
                    if labels[batch[k / self.classes]] == k % self.classes { 1.0 } else { 0.0 }
                });
                let mut tape = Tape::new();
                let (b, probs) = self.forward(&mut tape, true, xb)?;
                let y = tape.constant(onehot)?;
                let logp = tape.log_clamped(probs, crate::training::PROB_FLOOR)?;
                let picked = tape.mul(logp, y)?;
                let s = tape.sum(picked)?;
                let loss = tape.scale(s, -1.0 / batch.len() as f64)?;
                let grads = tape.backward(loss)?;
                let g = b.collect(&grads, &tape);
                total += tape.value(loss).item() as f64 * batch.len() as f64;
                adam.step(&mut self.params, &g, cfg.lr)?;
            }
            losses.push(total / n);
        }
        Ok(losses)
    }
}

/// Cumulant features of every frame's front-end symbols.
pub fn dataset_hoc_features(ds: &Dataset, indices: &[usize], ps: &PulseShape, exec: Execution) -> Result<Vec<HocFeatures>> {
    exec.try_map(indices.len(), |k| hoc_features(&front_end(&ds.frames[indices[k]].samples, ps)?))
}

/// Fine-tuning settings of the CMA ablation.
#[derive(Clone, Debug, PartialEq)]
pub struct CmaAblationConfig {
    pub cma: CmaConfig,
    /// Classifier fine-tuning loop (phase `P1` semantics: classifier only).
    pub finetune: PhaseConfig,
}

#[derive(Clone, Debug)]
pub struct CmaAblation {
    pub test: Evaluation,
    pub params: ModelParams<f32>,
    pub log: Vec<EpochRecord>,
}

/// Front end, then CMA with dispersion constant `r2`, then unit power, as `[n, 2]` points.
pub fn cma_points(samples: &[Complex64], ps: &PulseShape, cma: &CmaConfig, r2: f64) -> Result<Tensor<f32>> {
    let symbols = front_end(samples, ps)?;
    let cfg = CmaConfig { r2, ..cma.clone() };
    let eq = cma_equalize(&symbols, &cfg)?;
    let z = unit_power_normalize(&eq.output)?;
    Ok(Tensor::<f64>::from_points(&sig2con(&z)).cast())
}

/// Replaces the learned equalizer with CMA: training frames use the true
/// label's dispersion constant, validation and test frames the configured
/// fixed `cma.r2`. The pretrained classifier is fine-tuned on CMA output and
/// evaluated on the test split.
#[allow(clippy::too_many_arguments)]
pub fn cma_ablation_pipeline(
    model: &Model,
    pretrained: &ModelParams<f32>,
    ds: &Dataset,
    splits: &Splits,
    ps: &PulseShape,
    cfg: &CmaAblationConfig,
    seed: u64,
    exec: Execution,
) -> Result<CmaAblation> {
    cfg.finetune.validate()?;
    if cfg.finetune.phase != crate::training::Phase::P1 || cfg.finetune.curriculum.is_some() {
        return Err(Error::invalid("CMA fine-tuning trains the classifier only, without curriculum"));
    }
    let mut cache: Vec<Option<Tensor<f32>>> = vec![None; ds.frames.len()];
    let tr = exec.try_map(splits.train.len(), |k| {
        let f = &ds.frames[splits.train[k]];
        cma_points(&f.samples, ps, &cfg.cma, reference_r2(f.label))
    })?;
    for (&i, p) in splits.train.iter().zip(tr) {
        cache[i] = Some(p);
    }
    let fixed_points = |idx: &[usize]| -> Result<Vec<Tensor<f32>>> {
        exec.try_map(idx.len(), |k| cma_points(&ds.frames[idx[k]].samples, ps, &cfg.cma, cfg.cma.r2))
    };
    let val_points = fixed_points(&splits.val)?;
    let test_points = fixed_points(&splits.test)?;
    let labels = ds.labels();
    let val_labels: Vec<usize> = splits.val.iter().map(|&i| labels[i]).collect();
    let input = |i: usize| -> Result<Tensor<f32>> {
        cache[i].clone().ok_or_else(|| Error::invalid(format!("frame {i} is not in the training split")))
    };
    let validate = |p: &ModelParams<f32>| -> Result<f64> {
        let pred = classify_points(&model.classifier, &p.classifier, &val_points, exec)?;
        Ok(Evaluation::from_predictions(&pred, &val_labels, ds.header.class_count())?.accuracy)
    };
    let snrs: Vec<f64> = ds.frames.iter().map(|f| f.snr_db).collect();
    let r2: Vec<f64> = ds.frames.iter().map(|f| reference_r2(f.label)).collect();
    let data = LoopData {
        train: &splits.train,
        labels: &labels,
        snrs: &snrs,
        r2: &r2,
        input: &input,
        validate: &validate,
    };
    let mut log = Vec::new();
    let (params, _) = optimize(model, &cfg.finetune, pretrained, &data, tag("cma-ablation"), seed, exec, &mut log)?;
    let pred = classify_points(&model.classifier, &params.classifier, &test_points, exec)?;
    let truth: Vec<usize> = splits.test.iter().map(|&i| labels[i]).collect();
    Ok(CmaAblation {
        test: Evaluation::from_predictions(&pred, &truth, ds.header.class_count())?,
        params,
        log,
    })
}
