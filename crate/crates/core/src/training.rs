//! Losses, the three-phase training protocol and evaluation.
//!
//! Phase 1 pretrains the classifier on classical front-end constellations of
//! AWGN+PO frames under a noise curriculum. Phase 2 freezes the classifier and
//! trains the equalizer on fading frames with cross-entropy plus a weighted
//! CMA dispersion term. Phase 3 fine-tunes both with cross-entropy only.

use crate::autodiff::{AdamState, Bound, Checkpoint, ParamSet, Real, Tape, Tensor, Var};
use crate::channel::ChannelKind;
use crate::classifier::{classify, init_classifier, ClassifierConfig};
use crate::dataset::{CurriculumSchedule, Dataset, Frame, Splits};
use crate::dsp::reference_r2;
use crate::equalizer::{signal_tensor, Equalizer};
use crate::parallel::Execution;
use crate::rng::{substream, tag, Stream};
use crate::{Error, Result};
use rand::seq::SliceRandom;
use std::fmt;

/// Probability floor inside the cross-entropy logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// `-ln(max(p[label], 1e-12))` for a `[1, C]` probability row.
pub fn loss_ce<T: Real>(tape: &mut Tape<T>, probs: Var, label: usize) -> Result<Var> {
    let shape = tape.value(probs).shape().to_vec();
    let classes = *shape.last().unwrap_or(&0);
    if label >= classes || tape.value(probs).len() != classes {
        return Err(Error::shape("loss_ce", format!("label {label} for probabilities {shape:?}")));
    }
    let onehot = tape.constant(Tensor::from_fn(&shape, |k| if k == label { T::one() } else { T::zero() }))?;
    let logp = tape.log_clamped(probs, PROB_FLOOR)?;
    let picked = tape.mul(logp, onehot)?;
    let s = tape.sum(picked)?;
    tape.scale(s, -1.0)
}

/// Mean over an `[n, 2]` point set of `(|z|² - r2)²`.
pub fn loss_cma<T: Real>(tape: &mut Tape<T>, points: Var, r2: f64) -> Result<Var> {
    let sq = tape.square(points)?;
    let modulus = tape.sum_last(sq)?;
    let d = tape.offset(modulus, -r2)?;
    let d2 = tape.square(d)?;
    tape.mean(d2)
}

/// `ce + lambda * cma`.
pub fn loss_total<T: Real>(tape: &mut Tape<T>, ce: Var, cma: Var, lambda: f64) -> Result<Var> {
    let w = tape.scale(cma, lambda)?;
    tape.add(ce, w)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Phase {
    P1,
    P2,
    P3,
}

impl Phase {
    pub fn number(self) -> u8 {
        match self {
            Phase::P1 => 1,
            Phase::P2 => 2,
            Phase::P3 => 3,
        }
    }

    pub fn from_number(n: u8) -> Option<Self> {
        match n {
            1 => Some(Phase::P1),
            2 => Some(Phase::P2),
            3 => Some(Phase::P3),
            _ => None,
        }
    }

    pub fn trains_equalizer(self) -> bool {
        self != Phase::P1
    }

    pub fn trains_classifier(self) -> bool {
        self != Phase::P2
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "P{}", self.number())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhaseConfig {
    pub phase: Phase,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_equalizer: f64,
    pub lr_classifier: f64,
    /// Weight of the CMA term; only used in phase 2.
    pub lambda: f64,
    /// Phase-1 noise curriculum; `None` trains on every training frame.
    pub curriculum: Option<CurriculumSchedule>,
}

impl PhaseConfig {
    /// Learning rates and loss weights of the reference protocol.
    pub fn standard(phase: Phase, epochs: usize, batch_size: usize) -> Self {
        PhaseConfig {
            phase,
            epochs,
            batch_size,
            lr_equalizer: 1e-3,
            lr_classifier: if phase == Phase::P3 { 2.5e-4 } else { 1e-3 },
            lambda: if phase == Phase::P2 { 1e-2 } else { 0.0 },
            curriculum: (phase == Phase::P1).then(CurriculumSchedule::standard),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch size must be positive"));
        }
        let positive = |x: f64| x.is_finite() && x > 0.0;
        if self.phase.trains_equalizer() && !positive(self.lr_equalizer)
            || self.phase.trains_classifier() && !positive(self.lr_classifier)
        {
            return Err(Error::invalid(format!("{} needs positive learning rates", self.phase)));
        }
        if self.phase == Phase::P3 && self.lr_classifier >= self.lr_equalizer {
            return Err(Error::invalid("phase 3 requires a classifier learning rate below the equalizer's"));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::invalid(format!("lambda {} must be non-negative", self.lambda)));
        }
        if self.lambda != 0.0 && self.phase != Phase::P2 {
            return Err(Error::invalid("the CMA term is only used in phase 2"));
        }
        if let Some(c) = &self.curriculum {
            if self.phase != Phase::P1 {
                return Err(Error::invalid("the noise curriculum applies to phase 1 only"));
            }
            c.validate()?;
        }
        Ok(())
    }
}

/// Network structure shared by every phase.
#[derive(Clone, Debug)]
pub struct Model {
    pub equalizer: Equalizer,
    pub classifier: ClassifierConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub equalizer: ParamSet<T>,
    pub classifier: ParamSet<T>,
}

const EQ_PREFIX: &str = "eq.";
const CLS_PREFIX: &str = "cls.";

impl<T: Real> ModelParams<T> {
    pub fn init(model: &Model, seed: u64) -> Result<Self> {
        Ok(ModelParams {
            equalizer: model.equalizer.init_params(&mut substream(seed, &[tag("init.equalizer")])),
            classifier: init_classifier(&model.classifier, &mut substream(seed, &[tag("init.classifier")]))?,
        })
    }

    pub fn num_scalars(&self) -> usize {
        self.equalizer.num_scalars() + self.classifier.num_scalars()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            equalizer: self.equalizer.cast(),
            classifier: self.classifier.cast(),
        }
    }

    pub fn flatten(&self) -> ParamSet<T> {
        let mut p = ParamSet::new();
        p.extend_prefixed(EQ_PREFIX, &self.equalizer);
        p.extend_prefixed(CLS_PREFIX, &self.classifier);
        p
    }

    /// Splits a flattened set and checks it against the model's layout.
    pub fn unflatten(model: &Model, flat: &ParamSet<T>) -> Result<Self> {
        let p = ModelParams {
            equalizer: flat.with_prefix_stripped(EQ_PREFIX),
            classifier: flat.with_prefix_stripped(CLS_PREFIX),
        };
        let reference = ModelParams::<T>::init(model, 0)?;
        p.equalizer.check_same_layout(&reference.equalizer)?;
        p.classifier.check_same_layout(&reference.classifier)?;
        if p.equalizer.len() + p.classifier.len() != flat.len() {
            return Err(Error::Format("checkpoint holds parameters outside the model".into()));
        }
        Ok(p)
    }
}

/// How a frame reaches the classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pipeline {
    /// Classical front end: DC removal, matched filter, decimation, UPNorm.
    FrontEnd,
    /// Residual blocks followed by the front end.
    Learned,
}

/// Equalized points of one frame as an `[n, 2]` f32 tensor.
pub fn frame_points(model: &Model, params: &ModelParams<f32>, frame: &Frame, pipeline: Pipeline) -> Result<Tensor<f32>> {
    match pipeline {
        Pipeline::FrontEnd => {
            let pts = model.equalizer.equalize::<f64>(None, &frame.samples)?;
            Ok(Tensor::<f64>::from_points(&pts).cast())
        }
        Pipeline::Learned => {
            let mut tape = Tape::new();
            let b = params.equalizer.bind(&mut tape, false)?;
            let y = tape.constant(signal_tensor::<f32>(&frame.samples))?;
            let z = model.equalizer.forward(&mut tape, Some(&b), y)?;
            Ok(tape.value(z).clone())
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    /// Rows indexed by true class, columns by prediction.
    pub confusion: Vec<Vec<usize>>,
}

impl Evaluation {
    pub fn from_predictions(predicted: &[usize], truth: &[usize], classes: usize) -> Result<Self> {
        if predicted.len() != truth.len() {
            return Err(Error::invalid("prediction and label counts differ"));
        }
        let mut confusion = vec![vec![0usize; classes]; classes];
        for (&p, &t) in predicted.iter().zip(truth) {
            if p >= classes || t >= classes {
                return Err(Error::invalid(format!("class index out of range ({t} -> {p})")));
            }
            confusion[t][p] += 1;
        }
        let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
        let accuracy = if truth.is_empty() { 0.0 } else { correct as f64 / truth.len() as f64 };
        Ok(Evaluation { accuracy, confusion })
    }

    /// Plain-text confusion table with class names as row and column labels.
    pub fn confusion_table(&self, names: &[String]) -> String {
        let width = names.iter().map(|n| n.len()).max().unwrap_or(0).max(6);
        let mut s = format!("{:>width$}", "true\\pred");
        for n in names {
            s.push_str(&format!(" {n:>width$}"));
        }
        s.push('\n');
        for (n, row) in names.iter().zip(&self.confusion) {
            s.push_str(&format!("{n:>width$}"));
            for c in row {
                s.push_str(&format!(" {c:>width$}"));
            }
            s.push('\n');
        }
        s
    }
}

fn argmax<T: Real>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Classifies precomputed point sets with dropout off.
pub fn classify_points(
    cfg: &ClassifierConfig,
    params: &ParamSet<f32>,
    points: &[Tensor<f32>],
    exec: Execution,
) -> Result<Vec<usize>> {
    exec.try_map(points.len(), |i| -> Result<usize> {
        let (_, probs) = crate::classifier::predict(params, cfg, &points[i])?;
        Ok(argmax(&probs))
    })
}

/// Accuracy and confusion of the model on the frames at `indices`.
pub fn evaluate(
    model: &Model,
    params: &ModelParams<f32>,
    ds: &Dataset,
    indices: &[usize],
    pipeline: Pipeline,
    exec: Execution,
) -> Result<Evaluation> {
    let predicted = exec.try_map(indices.len(), |k| -> Result<usize> {
        let pts = frame_points(model, params, &ds.frames[indices[k]], pipeline)?;
        let (_, probs) = crate::classifier::predict(&params.classifier, &model.classifier, &pts)?;
        Ok(argmax(&probs))
    })?;
    let truth: Vec<usize> = indices.iter().map(|&i| ds.label_index(i)).collect();
    Evaluation::from_predictions(&predicted, &truth, ds.header.class_count())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub frames: usize,
    pub mean_loss: f64,
    pub val_accuracy: f64,
    /// Distinct SNRs of the frames trained on this epoch, highest first.
    pub snrs: Vec<f64>,
    /// Whether this epoch produced the phase's best snapshot so far.
    pub best: bool,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let snrs: Vec<String> = self.snrs.iter().map(|s| format!("{s}")).collect();
        write!(
            f,
            "phase={} epoch={} frames={} loss={:.6} val_acc={:.4} snrs={}{}",
            self.phase.number(),
            self.epoch,
            self.frames,
            self.mean_loss,
            self.val_accuracy,
            snrs.join(","),
            if self.best { " best" } else { "" }
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Highest phase completed so far (0 when untrained).
    pub completed: u8,
    pub params: ModelParams<f32>,
    /// Optimizer states at the selected snapshot of the last phase.
    pub adam: NamedAdam,
    pub log: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(model: &Model, seed: u64) -> Result<Self> {
        Ok(TrainState {
            completed: 0,
            params: ModelParams::init(model, seed)?,
            adam: Vec::new(),
            log: Vec::new(),
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            phase: self.completed,
            params: self.params.flatten(),
            adam: self.adam.clone(),
        }
    }

    pub fn from_checkpoint(model: &Model, ckpt: &Checkpoint) -> Result<Self> {
        Ok(TrainState {
            completed: ckpt.phase,
            params: ModelParams::unflatten(model, &ckpt.params)?,
            adam: ckpt.adam.clone(),
            log: Vec::new(),
        })
    }

    pub fn metrics_text(&self) -> String {
        self.log.iter().map(|r| format!("{r}\n")).collect()
    }
}

/// Phase objective on already-bound parameters. `x` is an `[n, 2]` point
/// set when `eq` is `None` and a `[2, L]` signal otherwise.
#[allow(clippy::too_many_arguments)]
pub fn phase_loss<T: Real>(
    tape: &mut Tape<T>,
    model: &Model,
    eq: Option<&Bound>,
    cls: &Bound,
    phase: Phase,
    x: Var,
    label: usize,
    r2: f64,
    lambda: f64,
    rng: &mut Stream,
) -> Result<(Var, Var)> {
    let points = match eq {
        Some(b) => model.equalizer.forward(tape, Some(b), x)?,
        None => x,
    };
    // the frozen classifier in phase 2 runs in inference mode
    let train = phase.trains_classifier();
    let out = classify(tape, cls, &model.classifier, points, train, rng)?;
    let ce = loss_ce(tape, out.probs, label)?;
    let loss = if phase == Phase::P2 && lambda != 0.0 {
        let cma = loss_cma(tape, points, r2)?;
        loss_total(tape, ce, cma, lambda)?
    } else {
        ce
    };
    Ok((loss, out.probs))
}

/// Loss of one frame plus the handles needed to read parameter gradients.
pub struct FrameGraph<'a> {
    pub loss: Var,
    pub probs: Var,
    pub equalizer: Option<Bound<'a>>,
    pub classifier: Bound<'a>,
}

/// Binds `params` with the phase's trainable flags and builds the objective.
/// Phase 1 expects a point set as `input`; phases 2 and 3 a signal.
#[allow(clippy::too_many_arguments)]
pub fn frame_objective<'a, T: Real>(
    tape: &mut Tape<T>,
    model: &Model,
    params: &'a ModelParams<T>,
    phase: Phase,
    input: Tensor<T>,
    label: usize,
    r2: f64,
    lambda: f64,
    rng: &mut Stream,
) -> Result<FrameGraph<'a>> {
    let x = tape.constant(input)?;
    let equalizer = if phase.trains_equalizer() {
        Some(params.equalizer.bind(tape, true)?)
    } else {
        None
    };
    let classifier = params.classifier.bind(tape, phase.trains_classifier())?;
    let (loss, probs) = phase_loss(tape, model, equalizer.as_ref(), &classifier, phase, x, label, r2, lambda, rng)?;
    Ok(FrameGraph {
        loss,
        probs,
        equalizer,
        classifier,
    })
}

struct FrameGrads {
    loss: f64,
    equalizer: Option<Vec<Tensor<f32>>>,
    classifier: Option<Vec<Tensor<f32>>>,
}

fn accumulate(acc: &mut Option<Vec<Tensor<f32>>>, g: Option<Vec<Tensor<f32>>>) {
    if let Some(g) = g {
        match acc {
            None => *acc = Some(g),
            Some(a) => a.iter_mut().zip(&g).for_each(|(x, y)| x.add_assign(y)),
        }
    }
}

fn check_prerequisites(model: &Model, cfg: &PhaseConfig, state: &TrainState, ds: &Dataset) -> Result<()> {
    let need = cfg.phase.number() - 1;
    if state.completed < need {
        return Err(Error::Prerequisite(format!(
            "{} needs a model that completed phase {need}; this one completed phase {}",
            cfg.phase, state.completed
        )));
    }
    if cfg.phase == Phase::P1 && ds.header.channel_kind != ChannelKind::AwgnPo {
        return Err(Error::invalid("phase 1 trains on AWGN+PO frames"));
    }
    if ds.header.class_count() != model.classifier.classes {
        return Err(Error::invalid(format!(
            "dataset has {} classes, classifier has {}",
            ds.header.class_count(),
            model.classifier.classes
        )));
    }
    if ds.header.sps != model.equalizer.sps() {
        return Err(Error::invalid("dataset and equalizer disagree on samples per symbol"));
    }
    Ok(())
}

/// Per-frame data the optimization loop draws on, indexed by dataset position.
pub(crate) struct LoopData<'a> {
    pub train: &'a [usize],
    pub labels: &'a [usize],
    pub snrs: &'a [f64],
    pub r2: &'a [f64],
    pub input: &'a (dyn Fn(usize) -> Result<Tensor<f32>> + Sync),
    pub validate: &'a (dyn Fn(&ModelParams<f32>) -> Result<f64> + Sync),
}

/// Optimizer moments keyed by parameter group (`eq`, `cls`).
pub type NamedAdam = Vec<(String, AdamState<f32>)>;

/// Mini-batch Adam over `cfg.epochs` epochs, keeping the best-validation
/// snapshot. `stream` separates the random streams of different loops.
#[allow(clippy::too_many_arguments)]
pub(crate) fn optimize(
    model: &Model,
    cfg: &PhaseConfig,
    start: &ModelParams<f32>,
    data: &LoopData,
    stream: u64,
    seed: u64,
    exec: Execution,
    log: &mut Vec<EpochRecord>,
) -> Result<(ModelParams<f32>, NamedAdam)> {
    let phase = cfg.phase;
    let mut params = start.clone();
    let mut adam_eq = AdamState::new(&params.equalizer);
    let mut adam_cls = AdamState::new(&params.classifier);
    let mut best: Option<(f64, ModelParams<f32>, NamedAdam)> = None;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = match &cfg.curriculum {
            Some(c) => data.train.iter().copied().filter(|&i| c.admits(epoch, data.snrs[i])).collect(),
            None => data.train.to_vec(),
        };
        if order.is_empty() {
            return Err(Error::invalid(format!("no training frames admissible at epoch {epoch}")));
        }
        order.shuffle(&mut substream(seed, &[tag("shuffle"), stream, epoch as u64]));
        let mut snrs: Vec<f64> = Vec::new();
        for &i in &order {
            if !snrs.contains(&data.snrs[i]) {
                snrs.push(data.snrs[i]);
            }
        }
        snrs.sort_by(|a, b| b.total_cmp(a));

        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results = exec.try_map(batch.len(), |k| -> Result<FrameGrads> {
                let i = batch[k];
                let mut rng = substream(seed, &[tag("dropout"), stream, epoch as u64, b as u64, i as u64]);
                let mut tape = Tape::new();
                let g = frame_objective(
                    &mut tape,
                    model,
                    &params,
                    phase,
                    (data.input)(i)?,
                    data.labels[i],
                    data.r2[i],
                    cfg.lambda,
                    &mut rng,
                )?;
                let grads = tape.backward(g.loss)?;
                Ok(FrameGrads {
                    loss: tape.value(g.loss).item().as_f64(),
                    equalizer: g.equalizer.as_ref().map(|e| e.collect(&grads, &tape)),
                    classifier: phase.trains_classifier().then(|| g.classifier.collect(&grads, &tape)),
                })
            })?;
            let n = results.len() as f32;
            let (mut geq, mut gcls) = (None, None);
            for r in results {
                loss_sum += r.loss;
                accumulate(&mut geq, r.equalizer);
                accumulate(&mut gcls, r.classifier);
            }
            if let Some(mut g) = geq {
                g.iter_mut().for_each(|t| t.scale_assign(1.0 / n));
                adam_eq.step(&mut params.equalizer, &g, cfg.lr_equalizer)?;
            }
            if let Some(mut g) = gcls {
                g.iter_mut().for_each(|t| t.scale_assign(1.0 / n));
                adam_cls.step(&mut params.classifier, &g, cfg.lr_classifier)?;
            }
        }
        let val = (data.validate)(&params)?;
        let improved = best.as_ref().is_none_or(|(acc, _, _)| val > *acc);
        if improved {
            let adam = vec![("eq".to_string(), adam_eq.clone()), ("cls".to_string(), adam_cls.clone())];
            best = Some((val, params.clone(), adam));
        }
        log.push(EpochRecord {
            phase,
            epoch,
            frames: order.len(),
            mean_loss: loss_sum / order.len() as f64,
            val_accuracy: val,
            snrs,
            best: improved,
        });
    }
    let (_, params, adam) = best.ok_or_else(|| Error::invalid("no epochs to run"))?;
    Ok((params, adam))
}

/// Runs one training phase and returns the state holding the best-validation
/// snapshot. Gradients are computed per frame (in parallel under
/// [`Execution::Parallel`]) and summed in batch order, so results do not
/// depend on the execution policy.
pub fn train_phase(
    model: &Model,
    cfg: &PhaseConfig,
    state: TrainState,
    ds: &Dataset,
    splits: &Splits,
    seed: u64,
    exec: Execution,
) -> Result<TrainState> {
    cfg.validate()?;
    check_prerequisites(model, cfg, &state, ds)?;
    if splits.train.is_empty() || splits.val.is_empty() {
        return Err(Error::invalid("training needs non-empty train and validation splits"));
    }
    let phase = cfg.phase;
    let pipeline = if phase == Phase::P1 { Pipeline::FrontEnd } else { Pipeline::Learned };

    // Phase-1 inputs never change, so the front end runs once per frame.
    let mut cached: Vec<Option<Tensor<f32>>> = vec![None; ds.frames.len()];
    if phase == Phase::P1 {
        let pts = exec.try_map(splits.train.len(), |k| {
            frame_points(model, &state.params, &ds.frames[splits.train[k]], Pipeline::FrontEnd)
        })?;
        for (&i, p) in splits.train.iter().zip(pts) {
            cached[i] = Some(p);
        }
    }
    let input = |i: usize| -> Result<Tensor<f32>> {
        match &cached[i] {
            Some(p) => Ok(p.clone()),
            None => Ok(signal_tensor::<f32>(&ds.frames[i].samples)),
        }
    };
    let validate = |p: &ModelParams<f32>| -> Result<f64> {
        Ok(evaluate(model, p, ds, &splits.val, pipeline, exec)?.accuracy)
    };
    let labels = ds.labels();
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
    let mut log = state.log.clone();
    let (params, adam) = optimize(model, cfg, &state.params, &data, phase.number() as u64, seed, exec, &mut log)?;
    Ok(TrainState {
        completed: state.completed.max(phase.number()),
        params,
        adam,
        log,
    })
}
