//! Run configuration file (TOML). Every section is optional except `seed`
//! and `output_dir`; missing values take the desk-scale defaults. Unknown
//! keys are rejected.

use modclass::baselines::{CmaConfig, HocMlpConfig};
use modclass::channel::{ChannelConfig, ChannelKind};
use modclass::classifier::{ClassifierConfig, DEFAULT_QK_GAIN};
use modclass::dataset::{CurriculumSchedule, DatasetHeader, FORMAT_VERSION};
use modclass::dsp::{rrc_taps, ModulationType, PulseShape};
use modclass::equalizer::{Equalizer, EqualizerConfig};
use modclass::training::{Model, Phase, PhaseConfig};
use serde::Deserialize;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub awgn_po: AwgnPoSection,
    #[serde(default)]
    pub fading: FadingSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default = "PhaseSection::default_p1")]
    pub phase1: PhaseSection,
    #[serde(default = "PhaseSection::default_p2")]
    pub phase2: PhaseSection,
    #[serde(default = "PhaseSection::default_p3")]
    pub phase3: PhaseSection,
    #[serde(default)]
    pub cma: CmaSection,
    #[serde(default)]
    pub cma_ablation: AblationSection,
    #[serde(default)]
    pub ml: MlSection,
    #[serde(default)]
    pub hoc: HocSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub frame_length: usize,
    pub sps: usize,
    pub rolloff: f64,
    pub span_symbols: usize,
    pub classes: Vec<String>,
    pub frames_per_class: usize,
    /// Train, validation and test fractions.
    pub splits: [f64; 3],
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            frame_length: 4096,
            sps: 8,
            rolloff: 0.35,
            span_symbols: 4,
            classes: ["BPSK", "QPSK", "16QAM", "64QAM"].map(String::from).to_vec(),
            frames_per_class: 300,
            splits: [0.8, 0.1, 0.1],
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AwgnPoSection {
    pub snr_db: Vec<f64>,
}

impl Default for AwgnPoSection {
    fn default() -> Self {
        AwgnPoSection {
            snr_db: vec![20.0, 24.0, 28.0],
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FadingSection {
    /// "rician" or "rayleigh".
    pub channel: String,
    pub snr_db: f64,
    pub sample_rate: Option<f64>,
    pub path_delays_us: Option<Vec<f64>>,
    pub path_gains_db: Option<Vec<f64>>,
    pub k_factor: Option<f64>,
    pub tap_count: Option<usize>,
}

impl Default for FadingSection {
    fn default() -> Self {
        FadingSection {
            channel: "rayleigh".into(),
            snr_db: 30.0,
            sample_rate: None,
            path_delays_us: None,
            path_gains_db: None,
            k_factor: None,
            tap_count: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub kernel_size: usize,
    pub blocks: usize,
    pub init_noise: f64,
    pub hidden: usize,
    pub heads: usize,
    pub inducing: usize,
    pub dropout: f64,
    pub qk_gain: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            kernel_size: 65,
            blocks: 2,
            init_noise: 1e-3,
            hidden: 32,
            heads: 4,
            inducing: 16,
            dropout: 0.5,
            qk_gain: DEFAULT_QK_GAIN,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumSection {
    pub start_snr: f64,
    pub step: f64,
    pub epochs_per_step: usize,
    pub floor_snr: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSection {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub lr_equalizer: Option<f64>,
    #[serde(default)]
    pub lr_classifier: Option<f64>,
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub curriculum: Option<CurriculumSection>,
}

impl PhaseSection {
    fn default_with(epochs: usize, batch_size: usize) -> Self {
        PhaseSection {
            epochs,
            batch_size,
            lr_equalizer: None,
            lr_classifier: None,
            lambda: None,
            curriculum: None,
        }
    }

    fn default_p1() -> Self {
        PhaseSection {
            curriculum: Some(CurriculumSection {
                start_snr: 28.0,
                step: 4.0,
                epochs_per_step: 3,
                floor_snr: 20.0,
            }),
            ..Self::default_with(30, 8)
        }
    }

    fn default_p2() -> Self {
        Self::default_with(20, 8)
    }

    fn default_p3() -> Self {
        Self::default_with(20, 8)
    }

    /// Reference learning rates and λ, overridden by any value present.
    pub fn to_phase_config(&self, phase: Phase) -> PhaseConfig {
        let mut cfg = PhaseConfig::standard(phase, self.epochs, self.batch_size);
        if let Some(lr) = self.lr_equalizer {
            cfg.lr_equalizer = lr;
        }
        if let Some(lr) = self.lr_classifier {
            cfg.lr_classifier = lr;
        }
        if let Some(l) = self.lambda {
            cfg.lambda = l;
        }
        cfg.curriculum = self.curriculum.as_ref().map(|c| CurriculumSchedule {
            start_snr: c.start_snr,
            step: c.step,
            epochs_per_step: c.epochs_per_step,
            floor_snr: c.floor_snr,
        });
        cfg
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CmaSection {
    pub filter_length: usize,
    pub step_size: f64,
    pub iterations: usize,
    /// Dispersion constant used when the true modulation is unknown.
    pub r2: f64,
    pub divergence_bound: f64,
}

impl Default for CmaSection {
    fn default() -> Self {
        let d = CmaConfig::default();
        CmaSection {
            filter_length: d.filter_length,
            step_size: d.step_size,
            iterations: d.iterations,
            r2: d.r2,
            divergence_bound: d.divergence_bound,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_classifier: f64,
}

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection {
            epochs: 20,
            batch_size: 8,
            lr_classifier: 2.5e-4,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct MlSection {
    /// Candidate alphabets; empty means the dataset's classes.
    pub candidates: Vec<String>,
}


#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HocSection {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for HocSection {
    fn default() -> Self {
        let d = HocMlpConfig::default();
        HocSection {
            hidden: d.hidden,
            epochs: d.epochs,
            batch_size: d.batch_size,
            lr: d.lr,
        }
    }
}

fn parse_classes(names: &[String]) -> Result<Vec<ModulationType>, String> {
    names.iter().map(|n| n.parse::<ModulationType>().map_err(|e| e.to_string())).collect()
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks every derived library configuration before any work starts.
    pub fn validate(&self) -> Result<(), String> {
        let e = |x: modclass::Error| x.to_string();
        parse_classes(&self.data.classes).map_err(|x| format!("[data] {x}"))?;
        self.fading_kind()?;
        let ps = self.pulse().map_err(e)?;
        for kind in self.dataset_kinds() {
            self.header(kind).validate().map_err(e)?;
            self.channel(kind)?.validate().map_err(e)?;
        }
        if ps.sps != self.data.sps {
            return Err("pulse and data disagree on sps".into());
        }
        let model = self.model().map_err(e)?;
        model.classifier.validate().map_err(e)?;
        for (p, s) in [(Phase::P1, &self.phase1), (Phase::P2, &self.phase2), (Phase::P3, &self.phase3)] {
            s.to_phase_config(p).validate().map_err(|x| format!("[phase{}] {x}", p.number()))?;
        }
        self.cma().validate().map_err(e)?;
        self.ablation_config().validate().map_err(|x| format!("[cma_ablation] {x}"))?;
        self.ml_candidates()?;
        let [a, b, c] = self.data.splits;
        modclass::dataset::split_dataset(&[0], (a, b, c), 0).map_err(e)?;
        Ok(())
    }

    pub fn classes(&self) -> Vec<ModulationType> {
        parse_classes(&self.data.classes).unwrap_or_default()
    }

    pub fn pulse(&self) -> modclass::Result<PulseShape> {
        rrc_taps(self.data.rolloff, self.data.span_symbols, self.data.sps)
    }

    pub fn fading_kind(&self) -> Result<ChannelKind, String> {
        match self.fading.channel.parse::<ChannelKind>() {
            Ok(k) if k.is_fading() => Ok(k),
            _ => Err(format!("[fading] channel must be \"rician\" or \"rayleigh\", got {:?}", self.fading.channel)),
        }
    }

    /// AWGN+PO first, then the configured fading channel.
    pub fn dataset_kinds(&self) -> Vec<ChannelKind> {
        let mut v = vec![ChannelKind::AwgnPo];
        if let Ok(k) = self.fading_kind() {
            v.push(k);
        }
        v
    }

    pub fn header(&self, kind: ChannelKind) -> DatasetHeader {
        let snr_list = if kind.is_fading() { vec![self.fading.snr_db] } else { self.awgn_po.snr_db.clone() };
        DatasetHeader {
            version: FORMAT_VERSION,
            frame_length: self.data.frame_length,
            sps: self.data.sps,
            classes: self.classes(),
            frames_per_class: self.data.frames_per_class,
            channel_kind: kind,
            snr_list,
            seed: modclass::rng::derive_seed(self.seed, &[modclass::rng::tag("data"), kind.code() as u64]),
        }
    }

    pub fn channel(&self, kind: ChannelKind) -> Result<ChannelConfig, String> {
        if !kind.is_fading() {
            return Ok(ChannelConfig::standard(kind));
        }
        let kind = self.fading_kind()?;
        let mut c = ChannelConfig::standard(kind);
        let f = &self.fading;
        if let Some(v) = f.sample_rate {
            c.sample_rate = v;
        }
        if let Some(v) = &f.path_delays_us {
            c.path_delays = v.iter().map(|d| d * 1e-6).collect();
        }
        if let Some(v) = &f.path_gains_db {
            c.path_gains_db = v.clone();
        }
        if let Some(v) = f.k_factor {
            c.k_factor = v;
        }
        if let Some(v) = f.tap_count {
            c.tap_count = v;
        }
        Ok(c)
    }

    pub fn model(&self) -> modclass::Result<Model> {
        let m = &self.model;
        let eq = EqualizerConfig {
            kernel_size: m.kernel_size,
            blocks: m.blocks,
            init_noise: m.init_noise,
        };
        Ok(Model {
            equalizer: Equalizer::new(eq, &self.pulse()?)?,
            classifier: ClassifierConfig {
                input_dim: 2,
                hidden: m.hidden,
                heads: m.heads,
                inducing: m.inducing,
                seeds: 1,
                classes: self.data.classes.len(),
                dropout: m.dropout,
                qk_gain: m.qk_gain,
            },
        })
    }

    pub fn phase(&self, phase: Phase) -> PhaseConfig {
        match phase {
            Phase::P1 => self.phase1.to_phase_config(phase),
            Phase::P2 => self.phase2.to_phase_config(phase),
            Phase::P3 => self.phase3.to_phase_config(phase),
        }
    }

    pub fn splits(&self) -> (f64, f64, f64) {
        let [a, b, c] = self.data.splits;
        (a, b, c)
    }

    pub fn cma(&self) -> CmaConfig {
        let c = &self.cma;
        CmaConfig {
            filter_length: c.filter_length,
            step_size: c.step_size,
            iterations: c.iterations,
            r2: c.r2,
            divergence_bound: c.divergence_bound,
        }
    }

    pub fn ablation_config(&self) -> PhaseConfig {
        let a = &self.cma_ablation;
        let mut cfg = PhaseConfig::standard(Phase::P1, a.epochs, a.batch_size);
        cfg.curriculum = None;
        cfg.lr_classifier = a.lr_classifier;
        cfg
    }

    pub fn ml_candidates(&self) -> Result<Vec<ModulationType>, String> {
        if self.ml.candidates.is_empty() {
            parse_classes(&self.data.classes)
        } else {
            parse_classes(&self.ml.candidates)
        }
    }

    pub fn hoc(&self) -> HocMlpConfig {
        HocMlpConfig {
            hidden: self.hoc.hidden,
            epochs: self.hoc.epochs,
            batch_size: self.hoc.batch_size,
            lr: self.hoc.lr,
        }
    }

    pub fn dataset_path(&self, kind: ChannelKind) -> PathBuf {
        let name = match kind {
            ChannelKind::AwgnPo => "awgn_po",
            ChannelKind::Rician => "rician",
            ChannelKind::Rayleigh => "rayleigh",
        };
        self.output_dir.join(format!("{name}.emc2"))
    }

    pub fn checkpoint_path(&self, phase: Phase) -> PathBuf {
        self.output_dir.join(format!("p{}.ckpt", phase.number()))
    }

    pub fn metrics_path(&self, phase: Phase) -> PathBuf {
        self.output_dir.join(format!("metrics_p{}.log", phase.number()))
    }

    pub fn output(&self, name: &str) -> PathBuf {
        self.output_dir.join(name)
    }

    /// Resolves `output_dir` relative to the config file's directory.
    pub fn resolve_relative_to(&mut self, config_path: &Path) {
        if self.output_dir.is_relative() {
            if let Some(parent) = config_path.parent() {
                self.output_dir = parent.join(&self.output_dir);
            }
        }
    }
}
