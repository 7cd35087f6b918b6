//! Subcommand implementations. Each returns the text it reports on stdout;
//! files are written under the configured output directory.

use crate::config::RunConfig;
use modclass::autodiff::{load_checkpoint, save_checkpoint};
use modclass::baselines::{
    cma_ablation_pipeline, cma_points, dataset_hoc_features, ml_classify, effective_symbol_snr_db, CmaAblationConfig, HocMlp,
};
use modclass::channel::ChannelKind;
use modclass::dataset::{generate_dataset, load_dataset, save_dataset, split_dataset, Dataset, Splits};
use modclass::dsp::{front_end, ModulationType};
use modclass::parallel::Execution;
use modclass::rng::{derive_seed, tag};
use modclass::training::{evaluate, frame_points, train_phase, Evaluation, Phase, Pipeline, TrainState};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Prerequisite(String),
    Io(String),
    Run(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Run(_) => 1,
            CliError::Config(_) => 2,
            CliError::Prerequisite(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Prerequisite(m) => write!(f, "missing prerequisite: {m}"),
            CliError::Io(m) => write!(f, "I/O error: {m}"),
            CliError::Run(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<modclass::Error> for CliError {
    fn from(e: modclass::Error) -> Self {
        use modclass::Error as E;
        match e {
            E::InvalidArgument(_) => CliError::Config(e.to_string()),
            E::Prerequisite(_) => CliError::Prerequisite(e.to_string()),
            E::Io(_) | E::Format(_) | E::Version { .. } | E::Truncated(_) => CliError::Io(e.to_string()),
            _ => CliError::Run(e.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

pub fn load_config(path: &Path) -> CliResult<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, format!("cannot read config: {e}")))?;
    let mut cfg = RunConfig::from_toml(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    cfg.resolve_relative_to(path);
    Ok(cfg)
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn exec() -> Execution {
    Execution::Parallel
}

/// Which generated dataset a command reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataChoice {
    AwgnPo,
    Fading,
}

impl DataChoice {
    fn kind(self, cfg: &RunConfig) -> CliResult<ChannelKind> {
        match self {
            DataChoice::AwgnPo => Ok(ChannelKind::AwgnPo),
            DataChoice::Fading => cfg.fading_kind().map_err(CliError::Config),
        }
    }
}

fn load_data(cfg: &RunConfig, kind: ChannelKind) -> CliResult<(Dataset, Splits)> {
    let path = cfg.dataset_path(kind);
    if !path.exists() {
        return Err(CliError::Prerequisite(format!(
            "dataset {} not found; run gen-data first",
            path.display()
        )));
    }
    let ds = load_dataset(&path).map_err(|e| io_err(&path, e))?;
    if ds.header != cfg.header(kind) {
        return Err(CliError::Prerequisite(format!(
            "dataset {} was generated with a different configuration; rerun gen-data",
            path.display()
        )));
    }
    let seed = derive_seed(cfg.seed, &[tag("split"), kind.code() as u64]);
    let splits = split_dataset(&ds.labels(), cfg.splits(), seed)?;
    Ok((ds, splits))
}

fn split_indices<'a>(splits: &'a Splits, name: &str) -> CliResult<&'a [usize]> {
    match name {
        "train" => Ok(&splits.train),
        "val" => Ok(&splits.val),
        "test" => Ok(&splits.test),
        _ => Err(CliError::Config(format!("unknown split {name:?}; use train, val or test"))),
    }
}

fn class_names(ds: &Dataset) -> Vec<String> {
    ds.header.classes.iter().map(|c| c.name().to_string()).collect()
}

fn load_state(cfg: &RunConfig, path: &Path) -> CliResult<TrainState> {
    if !path.exists() {
        return Err(CliError::Prerequisite(format!("checkpoint {} not found", path.display())));
    }
    let model = cfg.model()?;
    let ckpt = load_checkpoint(path).map_err(|e| io_err(path, e))?;
    TrainState::from_checkpoint(&model, &ckpt).map_err(|e| CliError::Prerequisite(format!("{}: {e}", path.display())))
}

pub fn gen_data(cfg: &RunConfig, only: Option<DataChoice>) -> CliResult<String> {
    let ps = cfg.pulse()?;
    let kinds = match only {
        Some(c) => vec![c.kind(cfg)?],
        None => cfg.dataset_kinds(),
    };
    let mut out = String::new();
    for kind in kinds {
        let header = cfg.header(kind);
        let channel = cfg.channel(kind).map_err(CliError::Config)?;
        let ds = generate_dataset(&header, &channel, &ps, exec())?;
        let path = cfg.dataset_path(kind);
        fs::create_dir_all(&cfg.output_dir).map_err(|e| io_err(&cfg.output_dir, e))?;
        save_dataset(&path, &ds).map_err(|e| io_err(&path, e))?;
        writeln!(
            out,
            "wrote {}: {} frames ({} classes x {}), channel {}, L={}",
            path.display(),
            ds.frames.len(),
            header.class_count(),
            header.frames_per_class,
            kind.name(),
            header.frame_length
        )
        .unwrap();
    }
    Ok(out)
}

fn phase_data(cfg: &RunConfig, phase: Phase) -> CliResult<ChannelKind> {
    if phase == Phase::P1 {
        Ok(ChannelKind::AwgnPo)
    } else {
        cfg.fading_kind().map_err(CliError::Config)
    }
}

pub fn train(cfg: &RunConfig, phases: &[Phase]) -> CliResult<String> {
    let model = cfg.model()?;
    let mut out = String::new();
    let mut state: Option<TrainState> = None;
    for &phase in phases {
        let start = match (state.take(), phase) {
            (Some(s), _) => s,
            (None, Phase::P1) => TrainState::new(&model, derive_seed(cfg.seed, &[tag("init")]))?,
            (None, p) => {
                let prev = Phase::from_number(p.number() - 1).expect("phase 2 or 3");
                let path = cfg.checkpoint_path(prev);
                if !path.exists() {
                    return Err(CliError::Prerequisite(format!(
                        "{p} needs {} from `train --phase {}`",
                        path.display(),
                        prev.number()
                    )));
                }
                load_state(cfg, &path)?
            }
        };
        let kind = phase_data(cfg, phase)?;
        let (ds, splits) = load_data(cfg, kind)?;
        let fresh_log = TrainState { log: Vec::new(), ..start };
        let trained = train_phase(
            &model,
            &cfg.phase(phase),
            fresh_log,
            &ds,
            &splits,
            derive_seed(cfg.seed, &[tag("train")]),
            exec(),
        )?;
        let ckpt_path = cfg.checkpoint_path(phase);
        save_checkpoint(&ckpt_path, &trained.to_checkpoint()).map_err(|e| io_err(&ckpt_path, e))?;
        write_file(&cfg.metrics_path(phase), &trained.metrics_text())?;
        let best = trained.log.iter().rfind(|r| r.best).expect("one epoch ran");
        writeln!(
            out,
            "{phase}: {} epochs on {}, best val_acc {:.4} at epoch {}; wrote {}",
            trained.log.len(),
            kind.name(),
            best.val_accuracy,
            best.epoch,
            ckpt_path.display()
        )
        .unwrap();
        state = Some(trained);
    }
    Ok(out)
}

fn report(title: &str, ds: &Dataset, split: &str, n: usize, e: &Evaluation) -> String {
    format!(
        "{title}\ndataset {} split {split} frames {n}\naccuracy {:.4}\n{}",
        ds.header.channel_kind.name(),
        e.accuracy,
        e.confusion_table(&class_names(ds))
    )
}

pub fn eval(cfg: &RunConfig, checkpoint: &Path, split: &str, data: Option<DataChoice>) -> CliResult<String> {
    let model = cfg.model()?;
    let state = load_state(cfg, checkpoint)?;
    let kind = match data {
        Some(c) => c.kind(cfg)?,
        None if state.completed <= 1 => ChannelKind::AwgnPo,
        None => cfg.fading_kind().map_err(CliError::Config)?,
    };
    let pipeline = if state.completed <= 1 { Pipeline::FrontEnd } else { Pipeline::Learned };
    let (ds, splits) = load_data(cfg, kind)?;
    let idx = split_indices(&splits, split)?;
    let e = evaluate(&model, &state.params, &ds, idx, pipeline, exec())?;
    let stem = checkpoint.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned());
    let text = report(
        &format!("checkpoint {stem} (phase {})", state.completed),
        &ds,
        split,
        idx.len(),
        &e,
    );
    write_file(&cfg.output(&format!("eval_{stem}_{}_{split}.txt", kind.name().to_lowercase().replace('+', "_"))), &text)?;
    Ok(text)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Baseline {
    Ml,
    Hoc,
    CmaAblation,
}

pub fn baseline(cfg: &RunConfig, which: Baseline, data: Option<DataChoice>) -> CliResult<String> {
    let ps = cfg.pulse()?;
    let default = if which == Baseline::CmaAblation { DataChoice::Fading } else { DataChoice::AwgnPo };
    let kind = data.unwrap_or(default).kind(cfg)?;
    let (name, text) = match which {
        Baseline::Ml => {
            let (ds, splits) = load_data(cfg, kind)?;
            let cands = cfg.ml_candidates().map_err(CliError::Config)?;
            let pred = exec().try_map(splits.test.len(), |k| -> modclass::Result<ModulationType> {
                let f = &ds.frames[splits.test[k]];
                let symbols = front_end(&f.samples, &ps)?;
                ml_classify(&symbols, effective_symbol_snr_db(f.snr_db, &ps), &cands)
            })?;
            // predictions outside the dataset's classes count as errors in an extra column
            let truth: Vec<usize> = splits.test.iter().map(|&i| ds.label_index(i)).collect();
            let mapped: Vec<usize> = pred
                .iter()
                .zip(&truth)
                .map(|(p, &t)| ds.header.class_index(*p).unwrap_or((t + 1) % ds.header.class_count()))
                .collect();
            let e = Evaluation::from_predictions(&mapped, &truth, ds.header.class_count())?;
            let names: Vec<&str> = cands.iter().map(|c| c.name()).collect();
            let title = format!("ML baseline, candidates {}", names.join(","));
            ("ml", report(&title, &ds, "test", truth.len(), &e))
        }
        Baseline::Hoc => {
            let (ds, splits) = load_data(cfg, kind)?;
            let train_f = dataset_hoc_features(&ds, &splits.train, &ps, exec())?;
            let test_f = dataset_hoc_features(&ds, &splits.test, &ps, exec())?;
            let labels = ds.labels();
            let train_l: Vec<usize> = splits.train.iter().map(|&i| labels[i]).collect();
            let test_l: Vec<usize> = splits.test.iter().map(|&i| labels[i]).collect();
            let hc = cfg.hoc();
            let seed = derive_seed(cfg.seed, &[tag("hoc")]);
            let mut mlp = HocMlp::new(hc.hidden, ds.header.class_count(), seed);
            mlp.train(&train_f, &train_l, &hc, seed)?;
            let e = Evaluation::from_predictions(&mlp.predict(&test_f)?, &test_l, ds.header.class_count())?;
            let title = format!("HOC-MLP baseline, {} parameters", mlp.params.num_scalars());
            ("hoc", report(&title, &ds, "test", test_l.len(), &e))
        }
        Baseline::CmaAblation => {
            let path = cfg.checkpoint_path(Phase::P1);
            if !path.exists() {
                return Err(CliError::Prerequisite(format!(
                    "the CMA ablation needs the pretrained classifier {}; run `train --phase 1`",
                    path.display()
                )));
            }
            let state = load_state(cfg, &path)?;
            let (ds, splits) = load_data(cfg, kind)?;
            let ab = CmaAblationConfig {
                cma: cfg.cma(),
                finetune: cfg.ablation_config(),
            };
            let model = cfg.model()?;
            let res = cma_ablation_pipeline(
                &model,
                &state.params,
                &ds,
                &splits,
                &ps,
                &ab,
                derive_seed(cfg.seed, &[tag("cma-ablation")]),
                exec(),
            )?;
            write_file(&cfg.output("metrics_cma_ablation.log"), &res.log.iter().map(|r| format!("{r}\n")).collect::<String>())?;
            let title = format!("CMA ablation, test-time r2 {}", ab.cma.r2);
            ("cma_ablation", report(&title, &ds, "test", splits.test.len(), &res.test))
        }
    };
    write_file(&cfg.output(&format!("baseline_{name}.txt")), &text)?;
    Ok(text)
}

fn points_text(points: &[[f64; 2]]) -> String {
    points.iter().map(|p| format!("{},{}\n", p[0], p[1])).collect()
}

pub fn export_constellation(
    cfg: &RunConfig,
    checkpoint: &Path,
    frames: &[usize],
    data: Option<DataChoice>,
) -> CliResult<String> {
    let model = cfg.model()?;
    let ps = cfg.pulse()?;
    let state = load_state(cfg, checkpoint)?;
    let kind = data.unwrap_or(DataChoice::Fading).kind(cfg)?;
    let (ds, _) = load_data(cfg, kind)?;
    let mut out = String::new();
    for &i in frames {
        let frame = ds
            .frames
            .get(i)
            .ok_or_else(|| CliError::Config(format!("frame {i} out of range (dataset has {})", ds.frames.len())))?;
        let before = frame_points(&model, &state.params, frame, Pipeline::FrontEnd)?;
        let after = frame_points(&model, &state.params, frame, Pipeline::Learned)?;
        let cma = cma_points(&frame.samples, &ps, &cfg.cma(), cfg.cma().r2)?;
        let tag = kind.name().to_lowercase().replace('+', "_");
        for (label, t) in [("before", before), ("after", after), ("cma", cma)] {
            let pts: Vec<[f64; 2]> = t.data().chunks_exact(2).map(|c| [c[0] as f64, c[1] as f64]).collect();
            let path: PathBuf = cfg.output(&format!("constellation_{tag}_{i}_{label}.txt"));
            write_file(&path, &points_text(&pts))?;
            writeln!(out, "wrote {} ({} points, {})", path.display(), pts.len(), frame.label.name()).unwrap();
        }
    }
    Ok(out)
}
