use crate::{Error, Result};
use num_complex::Complex64;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

/// The eight linear modulation types. The discriminant is the class index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModulationType {
    Bpsk = 0,
    Qpsk = 1,
    Psk8 = 2,
    Qam16 = 3,
    Qam32 = 4,
    Qam64 = 5,
    Qam128 = 6,
    Qam256 = 7,
}

impl ModulationType {
    pub const ALL: [ModulationType; 8] = [
        ModulationType::Bpsk,
        ModulationType::Qpsk,
        ModulationType::Psk8,
        ModulationType::Qam16,
        ModulationType::Qam32,
        ModulationType::Qam64,
        ModulationType::Qam128,
        ModulationType::Qam256,
    ];

    pub fn order(self) -> usize {
        1 << self.bits_per_symbol()
    }

    pub fn bits_per_symbol(self) -> usize {
        self as usize + 1
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Order of the alphabet's rotational symmetry group.
    pub fn rotational_symmetry(self) -> usize {
        match self {
            ModulationType::Bpsk => 2,
            ModulationType::Psk8 => 8,
            _ => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModulationType::Bpsk => "BPSK",
            ModulationType::Qpsk => "QPSK",
            ModulationType::Psk8 => "8PSK",
            ModulationType::Qam16 => "16QAM",
            ModulationType::Qam32 => "32QAM",
            ModulationType::Qam64 => "64QAM",
            ModulationType::Qam128 => "128QAM",
            ModulationType::Qam256 => "256QAM",
        }
    }
}

impl fmt::Display for ModulationType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModulationType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_uppercase().replace(['-', '_'], "");
        let mt = match norm.as_str() {
            "BPSK" => ModulationType::Bpsk,
            "QPSK" => ModulationType::Qpsk,
            "8PSK" | "PSK8" => ModulationType::Psk8,
            "16QAM" | "QAM16" => ModulationType::Qam16,
            "32QAM" | "QAM32" => ModulationType::Qam32,
            "64QAM" | "QAM64" => ModulationType::Qam64,
            "128QAM" | "QAM128" => ModulationType::Qam128,
            "256QAM" | "QAM256" => ModulationType::Qam256,
            _ => return Err(Error::invalid(format!("unknown modulation type {s:?}"))),
        };
        Ok(mt)
    }
}

/// Unit-power reference alphabet. `points[v]` is the symbol for the bit
/// group whose MSB-first value is `v`.
#[derive(Clone, Debug)]
pub struct ConstellationSpec {
    pub mt: ModulationType,
    pub points: Vec<Complex64>,
    pub r2: f64,
}

fn gray(k: usize) -> usize {
    k ^ (k >> 1)
}

/// Gray-coded PAM level for `bits` on an axis of `side` levels: odd
/// integers in `-(side-1)..=(side-1)`.
fn pam_level(bits: usize, side: usize) -> f64 {
    // position k has label gray(k); invert by search over a small axis
    let k = (0..side).find(|&k| gray(k) == bits).expect("label in range");
    (2 * k) as f64 - (side - 1) as f64
}

/// Odd-integer grid points of a cross constellation, row-major with Q
/// descending and I ascending.
fn cross_grid(side: usize, corner: usize) -> Vec<Complex64> {
    let level = |k: usize| (2 * k) as f64 - (side - 1) as f64;
    let in_corner = |k: usize| k < corner || k >= side - corner;
    let mut pts = Vec::new();
    for qi in (0..side).rev() {
        for ii in 0..side {
            if in_corner(ii) && in_corner(qi) {
                continue;
            }
            pts.push(Complex64::new(level(ii), level(qi)));
        }
    }
    pts
}

fn raw_points(mt: ModulationType) -> Vec<Complex64> {
    let m = mt.order();
    match mt {
        ModulationType::Bpsk => vec![Complex64::new(1.0, 0.0), Complex64::new(-1.0, 0.0)],
        ModulationType::Qpsk => (0..4)
            .map(|v| Complex64::new(1.0 - 2.0 * (v >> 1) as f64, 1.0 - 2.0 * (v & 1) as f64))
            .collect(),
        ModulationType::Psk8 => {
            let mut pts = vec![Complex64::new(0.0, 0.0); m];
            for k in 0..m {
                pts[gray(k)] = Complex64::from_polar(1.0, 2.0 * PI * k as f64 / m as f64);
            }
            pts
        }
        ModulationType::Qam16 | ModulationType::Qam64 | ModulationType::Qam256 => {
            let half = mt.bits_per_symbol() / 2;
            let side = 1 << half;
            (0..m)
                .map(|v| {
                    let i_bits = v >> half;
                    let q_bits = v & (side - 1);
                    Complex64::new(pam_level(i_bits, side), pam_level(q_bits, side))
                })
                .collect()
        }
        // Cross QAM cannot be perfectly Gray coded; label grid position k with gray(k).
        ModulationType::Qam32 | ModulationType::Qam128 => {
            let grid = if mt == ModulationType::Qam32 {
                cross_grid(6, 1)
            } else {
                cross_grid(12, 2)
            };
            let mut pts = vec![Complex64::new(0.0, 0.0); m];
            for (k, p) in grid.into_iter().enumerate() {
                pts[gray(k)] = p;
            }
            pts
        }
    }
}

/// Reference alphabet of `mt`, scaled to unit mean power.
pub fn constellation_points(mt: ModulationType) -> ConstellationSpec {
    let raw = raw_points(mt);
    let p = raw.iter().map(|v| v.norm_sqr()).sum::<f64>() / raw.len() as f64;
    let s = 1.0 / p.sqrt();
    let points: Vec<Complex64> = raw.iter().map(|v| v * s).collect();
    let m2 = points.iter().map(|v| v.norm_sqr()).sum::<f64>() / points.len() as f64;
    let m4 = points.iter().map(|v| v.norm_sqr().powi(2)).sum::<f64>() / points.len() as f64;
    ConstellationSpec {
        mt,
        points,
        r2: m4 / m2,
    }
}

/// Dispersion constant E|z|⁴ / E|z|² of the unit-power alphabet.
pub fn reference_r2(mt: ModulationType) -> f64 {
    constellation_points(mt).r2
}

/// Maps bits (one per byte, 0 or 1, MSB first within each group) onto symbols.
pub fn modulate(bits: &[u8], mt: ModulationType) -> Result<Vec<Complex64>> {
    let k = mt.bits_per_symbol();
    if !bits.len().is_multiple_of(k) {
        return Err(Error::invalid(format!(
            "{} bits is not a multiple of {k} bits per {mt} symbol",
            bits.len()
        )));
    }
    let spec = constellation_points(mt);
    bits.chunks_exact(k)
        .map(|g| {
            let v = g.iter().try_fold(0usize, |acc, &b| match b {
                0 | 1 => Ok((acc << 1) | b as usize),
                _ => Err(Error::invalid(format!("bit value {b} is not 0 or 1"))),
            })?;
            Ok(spec.points[v])
        })
        .collect()
}
