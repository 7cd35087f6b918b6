//! Checkpoint file: a named-parameter table plus optional Adam state blocks.
//!
//! ```text
//! "EMCK" | u16 version | u8 phase | u32 param_count
//!   per param: u16 name_len | name (UTF-8) | u8 rank | rank x u32 dims | f32 payload
//! u8 adam_block_count
//!   per block: u16 name_len | name | u64 step | f64 beta1 | f64 beta2 | f64 eps
//!              | u32 tensor_count | per tensor: u8 rank | dims | f32 m | f32 v
//! ```
//! All little-endian.

use super::{AdamState, ParamSet, Tensor};
use crate::binio::{put_f32s, LeReader};
use crate::{Error, Result};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"EMCK";
const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Training phase that produced the checkpoint (0 for untrained).
    pub phase: u8,
    pub params: ParamSet<f32>,
    pub adam: Vec<(String, AdamState<f32>)>,
}

fn put_name<W: Write>(w: &mut W, name: &str) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| Error::invalid(format!("name too long: {name}")))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    Ok(())
}

fn put_shape<W: Write>(w: &mut W, shape: &[usize]) -> Result<()> {
    let rank = u8::try_from(shape.len()).map_err(|_| Error::invalid("tensor rank above 255"))?;
    w.write_all(&[rank])?;
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| Error::invalid("dimension above u32"))?;
        w.write_all(&d.to_le_bytes())?;
    }
    Ok(())
}

fn get_name<R: Read>(r: &mut LeReader<R>) -> Result<String> {
    let len = r.u16()? as usize;
    let mut buf = vec![0u8; len];
    r.fill(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Format("parameter name is not UTF-8".into()))
}

fn get_shape<R: Read>(r: &mut LeReader<R>) -> Result<Vec<usize>> {
    let rank = r.u8()? as usize;
    (0..rank).map(|_| Ok(r.u32()? as usize)).collect()
}

pub fn write_checkpoint<W: Write>(w: &mut W, ckpt: &Checkpoint) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[ckpt.phase])?;
    w.write_all(&(ckpt.params.len() as u32).to_le_bytes())?;
    for (name, t) in ckpt.params.iter() {
        put_name(w, name)?;
        put_shape(w, t.shape())?;
        put_f32s(w, t.data().iter().copied())?;
    }
    let blocks = u8::try_from(ckpt.adam.len()).map_err(|_| Error::invalid("too many Adam blocks"))?;
    w.write_all(&[blocks])?;
    for (name, st) in &ckpt.adam {
        put_name(w, name)?;
        w.write_all(&st.step.to_le_bytes())?;
        for b in [st.beta1, st.beta2, st.eps] {
            w.write_all(&b.to_le_bytes())?;
        }
        w.write_all(&(st.m.len() as u32).to_le_bytes())?;
        for (m, v) in st.m.iter().zip(&st.v) {
            put_shape(w, m.shape())?;
            put_f32s(w, m.data().iter().copied())?;
            put_f32s(w, v.data().iter().copied())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<Checkpoint> {
    let mut r = LeReader::new(r, "checkpoint");
    if &r.bytes::<4>()? != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let phase = r.u8()?;
    let count = r.u32()? as usize;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name = get_name(&mut r)?;
        let shape = get_shape(&mut r)?;
        let n = shape.iter().product();
        params.insert(name, Tensor::new(shape, r.f32s(n)?)?);
    }
    let blocks = r.u8()?;
    let mut adam = Vec::with_capacity(blocks as usize);
    for _ in 0..blocks {
        let name = get_name(&mut r)?;
        let step = r.u64()?;
        let (beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?);
        let n = r.u32()? as usize;
        let mut m = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            let shape = get_shape(&mut r)?;
            let len = shape.iter().product();
            m.push(Tensor::new(shape.clone(), r.f32s(len)?)?);
            v.push(Tensor::new(shape, r.f32s(len)?)?);
        }
        adam.push((name, AdamState { m, v, step, beta1, beta2, eps }));
    }
    if !r.at_end()? {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(Checkpoint { phase, params, adam })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, ckpt)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
