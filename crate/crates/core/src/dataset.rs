//! Labeled frame generation, the on-disk dataset format, stratified splits
//! and the noise-curriculum schedule.
//!
//! ```text
//! "EMC2" | u16 version | u16 C | u32 L | u16 N | u8 channel_kind | u64 seed | u32 frame_count
//!   per frame: u8 label | f32 snr_db | f32 theta_or_zero | L x (f32 I, f32 Q)
//! ```
//! All little-endian. The label byte is the modulation index, so a file
//! holding a class subset still names its classes unambiguously.

use crate::binio::{put_f32s, LeReader};
use crate::channel::{apply_awgn, apply_multipath, apply_phase_offset, realize_fading, trim_transient, ChannelConfig, ChannelKind};
use crate::dsp::{modulate, pulse_shape, unit_power_normalize, ModulationType, PulseShape};
use crate::parallel::Execution;
use crate::rng::{substream, tag};
use crate::{Error, Result};
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::Rng;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"EMC2";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub samples: Vec<Complex64>,
    pub label: ModulationType,
    pub snr_db: f64,
    /// Phase offset applied to the frame, zero for fading channels.
    pub theta: f64,
    pub channel_kind: ChannelKind,
    /// Position of the frame in the dataset.
    pub seed_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetHeader {
    pub version: u16,
    pub frame_length: usize,
    pub sps: usize,
    /// Class list; classifier output `i` corresponds to `classes[i]`.
    pub classes: Vec<ModulationType>,
    pub frames_per_class: usize,
    pub channel_kind: ChannelKind,
    pub snr_list: Vec<f64>,
    pub seed: u64,
}

impl DatasetHeader {
    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn frame_count(&self) -> usize {
        self.classes.len() * self.frames_per_class
    }

    pub fn symbols_per_frame(&self) -> usize {
        self.frame_length / self.sps
    }

    /// Classifier index of a modulation, if it belongs to this dataset.
    pub fn class_index(&self, mt: ModulationType) -> Option<usize> {
        self.classes.iter().position(|&c| c == mt)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != FORMAT_VERSION {
            return Err(Error::Version {
                found: self.version,
                expected: FORMAT_VERSION,
            });
        }
        if self.sps == 0 || self.frame_length == 0 || !self.frame_length.is_multiple_of(self.sps) {
            return Err(Error::invalid(format!(
                "frame length {} must be a positive multiple of sps {}",
                self.frame_length, self.sps
            )));
        }
        if self.frame_length > u32::MAX as usize || self.sps > u16::MAX as usize {
            return Err(Error::invalid("frame length or sps exceeds the file format"));
        }
        if self.classes.is_empty() {
            return Err(Error::invalid("no classes"));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if self.classes[..i].contains(c) {
                return Err(Error::invalid(format!("duplicate class {c}")));
            }
        }
        if self.frames_per_class == 0 || self.frame_count() > u32::MAX as usize {
            return Err(Error::invalid("frames per class must be positive and fit the format"));
        }
        if self.snr_list.is_empty() || self.snr_list.iter().any(|s| !s.is_finite()) {
            return Err(Error::invalid("SNR list must be non-empty and finite"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub frames: Vec<Frame>,
}

impl Dataset {
    /// Classifier label of frame `i`.
    pub fn label_index(&self, i: usize) -> usize {
        self.header
            .class_index(self.frames[i].label)
            .expect("frame labels are validated against the class list")
    }

    pub fn labels(&self) -> Vec<usize> {
        (0..self.frames.len()).map(|i| self.label_index(i)).collect()
    }
}

/// Samples generated before trimming: twice the frame length.
pub fn generated_length(header: &DatasetHeader) -> usize {
    2 * header.frame_length
}

/// Samples dropped from the start of the received signal. At least the
/// channel length minus one plus the combined filter group delay, rounded up
/// so that the retained window starts on a symbol instant of the main path.
pub fn transient_discard(channel: &ChannelConfig, ps: &PulseShape) -> usize {
    let bulk = if channel.kind.is_fading() { channel.bulk_delay() } else { 0 };
    let min = channel.tap_count - 1 + 2 * ps.group_delay();
    let extra = min.saturating_sub(bulk);
    bulk + ps.sps * extra.div_ceil(ps.sps)
}

fn check_consistent(header: &DatasetHeader, channel: &ChannelConfig, ps: &PulseShape) -> Result<()> {
    header.validate()?;
    channel.validate()?;
    if channel.kind != header.channel_kind {
        return Err(Error::invalid(format!(
            "header channel {} does not match channel config {}",
            header.channel_kind.name(),
            channel.kind.name()
        )));
    }
    if ps.sps != header.sps {
        return Err(Error::invalid(format!("pulse sps {} differs from header sps {}", ps.sps, header.sps)));
    }
    let discard = transient_discard(channel, ps);
    let available = generated_length(header) + if channel.kind.is_fading() { channel.tap_count - 1 } else { 0 };
    if discard + header.frame_length > available {
        return Err(Error::invalid(format!(
            "frame length {} too short to absorb a {discard}-sample transient",
            header.frame_length
        )));
    }
    Ok(())
}

/// Builds one frame. SNR cycles through the header list by frame index so that
/// every class sees every SNR equally often.
pub fn generate_frame(
    header: &DatasetHeader,
    channel: &ChannelConfig,
    ps: &PulseShape,
    class: usize,
    index_in_class: usize,
) -> Result<Frame> {
    let mt = header.classes[class];
    let mut rng = substream(header.seed, &[tag("frame"), mt.index() as u64, index_in_class as u64]);
    let n_sym = generated_length(header) / header.sps;
    let bits: Vec<u8> = (0..n_sym * mt.bits_per_symbol()).map(|_| rng.random_range(0..2u8)).collect();
    let symbols = unit_power_normalize(&modulate(&bits, mt)?)?;
    let x = pulse_shape(&symbols, ps)?;
    let snr_db = header.snr_list[index_in_class % header.snr_list.len()];
    let (faded, theta) = if channel.kind.is_fading() {
        let h = realize_fading(channel, &mut rng)?;
        (apply_multipath(&x, &h)?, 0.0)
    } else {
        // stored as f32, so apply exactly the value that will be recorded
        let theta = rng.random_range(0.0..std::f64::consts::TAU) as f32 as f64;
        (apply_phase_offset(&x, theta), theta)
    };
    let y = apply_awgn(&faded, snr_db, &mut rng)?;
    let frame = trim_transient(&y, header.frame_length, transient_discard(channel, ps))?;
    Ok(Frame {
        samples: unit_power_normalize(&frame)?,
        label: mt,
        snr_db,
        theta,
        channel_kind: channel.kind,
        seed_index: class * header.frames_per_class + index_in_class,
    })
}

/// Generates all frames, class-major, each from its own (class, frame) substream.
pub fn generate_dataset(
    header: &DatasetHeader,
    channel: &ChannelConfig,
    ps: &PulseShape,
    exec: Execution,
) -> Result<Dataset> {
    check_consistent(header, channel, ps)?;
    let per = header.frames_per_class;
    let frames = exec.try_map(header.frame_count(), |g| generate_frame(header, channel, ps, g / per, g % per))?;
    Ok(Dataset {
        header: header.clone(),
        frames,
    })
}

pub fn write_dataset<W: Write>(w: &mut W, ds: &Dataset) -> Result<()> {
    let h = &ds.header;
    h.validate()?;
    w.write_all(MAGIC)?;
    w.write_all(&h.version.to_le_bytes())?;
    w.write_all(&(h.class_count() as u16).to_le_bytes())?;
    w.write_all(&(h.frame_length as u32).to_le_bytes())?;
    w.write_all(&(h.sps as u16).to_le_bytes())?;
    w.write_all(&[h.channel_kind.code()])?;
    w.write_all(&h.seed.to_le_bytes())?;
    w.write_all(&(ds.frames.len() as u32).to_le_bytes())?;
    for f in &ds.frames {
        if f.samples.len() != h.frame_length {
            return Err(Error::invalid(format!("frame {} has {} samples", f.seed_index, f.samples.len())));
        }
        w.write_all(&[f.label.index() as u8])?;
        w.write_all(&(f.snr_db as f32).to_le_bytes())?;
        w.write_all(&(f.theta as f32).to_le_bytes())?;
        put_f32s(w, f.samples.iter().flat_map(|s| [s.re as f32, s.im as f32]))?;
    }
    Ok(())
}

pub fn read_dataset<R: Read>(r: R) -> Result<Dataset> {
    let mut r = LeReader::new(r, "dataset file");
    if &r.bytes::<4>()? != MAGIC {
        return Err(Error::Format("not a dataset file (bad magic)".into()));
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let class_count = r.u16()? as usize;
    let frame_length = r.u32()? as usize;
    let sps = r.u16()? as usize;
    let code = r.u8()?;
    let channel_kind =
        ChannelKind::from_code(code).ok_or_else(|| Error::Format(format!("unknown channel kind {code}")))?;
    let seed = r.u64()?;
    let count = r.u32()? as usize;
    if class_count == 0 || !count.is_multiple_of(class_count) {
        return Err(Error::Format(format!("{count} frames cannot split evenly into {class_count} classes")));
    }
    let mut frames = Vec::with_capacity(count);
    for i in 0..count {
        let code = r.u8()?;
        let label = ModulationType::from_index(code as usize)
            .ok_or_else(|| Error::Format(format!("unknown modulation label {code}")))?;
        let snr_db = r.f32()? as f64;
        let theta = r.f32()? as f64;
        let raw = r.f32s(2 * frame_length)?;
        let samples = raw.chunks_exact(2).map(|c| Complex64::new(c[0] as f64, c[1] as f64)).collect();
        frames.push(Frame {
            samples,
            label,
            snr_db,
            theta,
            channel_kind,
            seed_index: i,
        });
    }
    if !r.at_end()? {
        return Err(Error::Format("trailing bytes after last frame".into()));
    }
    let mut classes: Vec<ModulationType> = Vec::new();
    let mut snr_list: Vec<f64> = Vec::new();
    for f in &frames {
        if !classes.contains(&f.label) {
            classes.push(f.label);
        }
        if !snr_list.contains(&f.snr_db) {
            snr_list.push(f.snr_db);
        }
    }
    // class_count was checked non-zero; count == 0 leaves the class list empty
    if classes.len() != class_count {
        return Err(Error::Format(format!(
            "header declares {class_count} classes but frames carry {}",
            classes.len()
        )));
    }
    let per = count / class_count;
    for c in &classes {
        if frames.iter().filter(|f| f.label == *c).count() != per {
            return Err(Error::Format(format!("class {c} does not have {per} frames")));
        }
    }
    let header = DatasetHeader {
        version,
        frame_length,
        sps,
        classes,
        frames_per_class: per,
        channel_kind,
        snr_list,
        seed,
    };
    header.validate().map_err(|e| Error::Format(format!("inconsistent header: {e}")))?;
    Ok(Dataset { header, frames })
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(&mut w, ds)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    read_dataset(BufReader::new(File::open(path)?))
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified split: each class is shuffled independently, then
/// `round(n * val)` and `round(n * test)` frames go to validation and test
/// and the rest to training. Index lists are returned sorted.
pub fn split_dataset(labels: &[usize], ratios: (f64, f64, f64), seed: u64) -> Result<Splits> {
    let (tr, va, te) = ratios;
    if [tr, va, te].iter().any(|r| !r.is_finite() || *r < 0.0) || ((tr + va + te) - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut s = Splits::default();
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(&mut substream(seed, &[tag("split"), c as u64]));
        let n = idx.len();
        let n_val = (n as f64 * va).round() as usize;
        let n_test = ((n as f64 * te).round() as usize).min(n - n_val);
        s.val.extend_from_slice(&idx[..n_val]);
        s.test.extend_from_slice(&idx[n_val..n_val + n_test]);
        s.train.extend_from_slice(&idx[n_val + n_test..]);
    }
    s.train.sort_unstable();
    s.val.sort_unstable();
    s.test.sort_unstable();
    Ok(s)
}

/// Phase-1 noise curriculum: training starts at `start_snr` and admits
/// `step` dB lower data every `epochs_per_step` epochs down to `floor_snr`.
#[derive(Clone, Debug, PartialEq)]
pub struct CurriculumSchedule {
    pub start_snr: f64,
    pub step: f64,
    pub epochs_per_step: usize,
    pub floor_snr: f64,
}

/// Tolerance when matching frame SNRs (stored as f32) against the schedule.
const SNR_MATCH: f64 = 1e-3;

impl CurriculumSchedule {
    /// 28 dB down to 10 dB in 2 dB steps every 10 epochs.
    pub fn standard() -> Self {
        CurriculumSchedule {
            start_snr: 28.0,
            step: 2.0,
            epochs_per_step: 10,
            floor_snr: 10.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0) || self.epochs_per_step == 0 || !(self.start_snr >= self.floor_snr) {
            return Err(Error::invalid(format!("invalid curriculum {self:?}")));
        }
        Ok(())
    }

    /// Admissible SNRs at `epoch`, highest first.
    pub fn admissible(&self, epoch: usize) -> Vec<f64> {
        let k_max = epoch / self.epochs_per_step;
        (0..=k_max)
            .map(|k| self.start_snr - k as f64 * self.step)
            .take_while(|s| *s >= self.floor_snr - SNR_MATCH)
            .collect()
    }

    pub fn admits(&self, epoch: usize, snr_db: f64) -> bool {
        self.admissible(epoch).iter().any(|s| (s - snr_db).abs() < SNR_MATCH)
    }
}

/// Training indices whose frame SNR is admissible at `epoch`.
pub fn curriculum_subset(ds: &Dataset, train: &[usize], epoch: usize, sched: &CurriculumSchedule) -> Vec<usize> {
    let admissible = sched.admissible(epoch);
    train
        .iter()
        .copied()
        .filter(|&i| admissible.iter().any(|s| (s - ds.frames[i].snr_db).abs() < SNR_MATCH))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{mean_power, rrc_taps};

    fn header(kind: ChannelKind, classes: Vec<ModulationType>, per: usize, snrs: Vec<f64>) -> DatasetHeader {
        DatasetHeader {
            version: FORMAT_VERSION,
            frame_length: 256,
            sps: 8,
            classes,
            frames_per_class: per,
            channel_kind: kind,
            snr_list: snrs,
            seed: 42,
        }
    }

    fn small(kind: ChannelKind) -> Dataset {
        let h = header(kind, vec![ModulationType::Bpsk, ModulationType::Qam16], 6, vec![10.0, 20.0, 28.0]);
        let ps = rrc_taps(0.35, 4, 8).unwrap();
        generate_dataset(&h, &ChannelConfig::standard(kind), &ps, Execution::Parallel).unwrap()
    }

    #[test]
    fn discard_lengths() {
        let ps = rrc_taps(0.35, 4, 8).unwrap();
        let fading = ChannelConfig::standard(ChannelKind::Rayleigh);
        assert_eq!(transient_discard(&fading, &ps), 54);
        assert_eq!(transient_discard(&ChannelConfig::standard(ChannelKind::AwgnPo), &ps), 56);
    }

    #[test]
    fn frames_have_unit_power_and_metadata() {
        for kind in [ChannelKind::AwgnPo, ChannelKind::Rician] {
            let ds = small(kind);
            assert_eq!(ds.frames.len(), 12);
            for (i, f) in ds.frames.iter().enumerate() {
                assert_eq!(f.samples.len(), 256);
                assert!((mean_power(&f.samples) - 1.0).abs() < 1e-9);
                assert_eq!(f.seed_index, i);
                assert_eq!(f.snr_db, [10.0, 20.0, 28.0][i % 6 % 3]);
                if kind.is_fading() {
                    assert_eq!(f.theta, 0.0);
                } else {
                    assert!((0.0..std::f64::consts::TAU).contains(&f.theta));
                }
            }
            assert_eq!(ds.labels(), vec![0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1]);
        }
    }

    #[test]
    fn execution_policy_does_not_change_output() {
        let h = header(ChannelKind::Rayleigh, vec![ModulationType::Qpsk], 4, vec![30.0]);
        let ps = rrc_taps(0.35, 4, 8).unwrap();
        let ch = ChannelConfig::standard(ChannelKind::Rayleigh);
        let a = generate_dataset(&h, &ch, &ps, Execution::Sequential).unwrap();
        let b = generate_dataset(&h, &ch, &ps, Execution::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn inconsistent_config_rejected() {
        let ps = rrc_taps(0.35, 4, 8).unwrap();
        let h = header(ChannelKind::Rayleigh, vec![ModulationType::Qpsk], 4, vec![30.0]);
        let awgn = ChannelConfig::standard(ChannelKind::AwgnPo);
        assert!(generate_dataset(&h, &awgn, &ps, Execution::Sequential).is_err());
        let mut bad = h.clone();
        bad.frame_length = 250;
        let ray = ChannelConfig::standard(ChannelKind::Rayleigh);
        assert!(generate_dataset(&bad, &ray, &ps, Execution::Sequential).is_err());
        let mut dup = h.clone();
        dup.classes = vec![ModulationType::Qpsk, ModulationType::Qpsk];
        assert!(dup.validate().is_err());
    }

    #[test]
    fn roundtrip_and_reserialization() {
        let ds = small(ChannelKind::AwgnPo);
        let mut a = Vec::new();
        write_dataset(&mut a, &ds).unwrap();
        assert_eq!(a.len(), 4 + 2 + 2 + 4 + 2 + 1 + 8 + 4 + 12 * (9 + 256 * 8));
        let back = read_dataset(&a[..]).unwrap();
        assert_eq!(back.header, ds.header);
        let mut b = Vec::new();
        write_dataset(&mut b, &back).unwrap();
        assert_eq!(a, b);
        for (x, y) in ds.frames.iter().zip(&back.frames) {
            assert_eq!(x.theta, y.theta);
            assert_eq!(x.snr_db, y.snr_db);
            assert!(x.samples.iter().zip(&y.samples).all(|(p, q)| (p - q).norm() < 1e-6));
        }
    }

    #[test]
    fn corrupt_files() {
        let ds = small(ChannelKind::Rayleigh);
        let mut a = Vec::new();
        write_dataset(&mut a, &ds).unwrap();
        assert!(matches!(read_dataset(&a[..a.len() - 3]), Err(Error::Truncated(_))));
        assert!(matches!(read_dataset(&a[..10]), Err(Error::Truncated(_))));
        let mut bad = a.clone();
        bad[0] = b'X';
        assert!(matches!(read_dataset(&bad[..]), Err(Error::Format(_))));
        let mut ver = a.clone();
        ver[4] = 9;
        assert!(matches!(read_dataset(&ver[..]), Err(Error::Version { found: 9, .. })));
        let mut extra = a;
        extra.push(0);
        assert!(matches!(read_dataset(&extra[..]), Err(Error::Format(_))));
    }

    #[test]
    fn split_counts() {
        let labels: Vec<usize> = (0..16_000).map(|i| i / 2000).collect();
        let s = split_dataset(&labels, (0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (12_800, 1_600, 1_600));
        for c in 0..8 {
            assert_eq!(s.val.iter().filter(|&&i| labels[i] == c).count(), 200);
            assert_eq!(s.test.iter().filter(|&&i| labels[i] == c).count(), 200);
        }
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..16_000).collect::<Vec<_>>());
        let t = split_dataset(&labels, (1.0, 0.0, 0.0), 7).unwrap();
        assert_eq!(t.train.len(), 16_000);
        assert!(split_dataset(&labels, (0.8, 0.1, 0.2), 7).is_err());
        assert_eq!(s, split_dataset(&labels, (0.8, 0.1, 0.1), 7).unwrap());
        assert_ne!(s, split_dataset(&labels, (0.8, 0.1, 0.1), 8).unwrap());
    }

    #[test]
    fn curriculum_schedule() {
        let c = CurriculumSchedule::standard();
        assert_eq!(c.admissible(0), vec![28.0]);
        assert_eq!(c.admissible(9), vec![28.0]);
        assert_eq!(c.admissible(10), vec![28.0, 26.0]);
        assert_eq!(c.admissible(35), vec![28.0, 26.0, 24.0, 22.0]);
        assert_eq!(c.admissible(89).len(), 9);
        let all: Vec<f64> = (0..10).map(|k| 28.0 - 2.0 * k as f64).collect();
        assert_eq!(c.admissible(90), all);
        assert_eq!(c.admissible(500), all);
        for e in 0..200 {
            let a = c.admissible(e);
            assert!(c.admissible(e + 1).len() >= a.len());
            assert!(a.iter().all(|s| c.admits(e + 1, *s)));
        }
    }

    #[test]
    fn curriculum_subset_filters() {
        let ds = small(ChannelKind::AwgnPo);
        let sched = CurriculumSchedule {
            start_snr: 28.0,
            step: 8.0,
            epochs_per_step: 2,
            floor_snr: 20.0,
        };
        let all: Vec<usize> = (0..12).collect();
        assert_eq!(curriculum_subset(&ds, &all, 0, &sched), vec![2, 5, 8, 11]);
        assert_eq!(curriculum_subset(&ds, &all, 3, &sched), vec![1, 2, 4, 5, 7, 8, 10, 11]);
        assert_eq!(curriculum_subset(&ds, &all, 100, &sched).len(), 8);
    }
}
