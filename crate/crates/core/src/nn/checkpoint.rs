//! `ABCW` checkpoint files.
//!
//! Layout (little-endian): magic `ABCW`, version `u16`, Adam step `u64`,
//! tensor count `u32`, then per tensor: name length `u16`, UTF-8 name, rank
//! `u8`, dims `u32 × rank`, raw `f32` data. Every parameter `p` is followed
//! by its moments `p.adam_m` and `p.adam_v`. A trailing `u32`-length-prefixed
//! `key=value` text block carries caller metadata.

use std::io::{Read, Write};

use super::params::{Param, ParamStore};
use super::tensor::Tensor;
use super::NnError;

pub const MAGIC: &[u8; 4] = b"ABCW";
pub const VERSION: u16 = 1;

const M_SUFFIX: &str = ".adam_m";
const V_SUFFIX: &str = ".adam_v";

fn write_tensor<W: Write>(w: &mut W, name: &str, t: &Tensor) -> Result<(), NnError> {
    let name_len = u16::try_from(name.len()).map_err(|_| NnError::Checkpoint(format!("name too long: {name}")))?;
    w.write_all(&name_len.to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&[t.shape().len() as u8])?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 4);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn write_checkpoint<W: Write>(mut w: W, store: &ParamStore, meta: &[(String, String)]) -> Result<(), NnError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&store.step.to_le_bytes())?;
    w.write_all(&((store.len() * 3) as u32).to_le_bytes())?;
    for p in store.params() {
        write_tensor(&mut w, &p.name, &p.value)?;
        write_tensor(&mut w, &format!("{}{M_SUFFIX}", p.name), &p.m)?;
        write_tensor(&mut w, &format!("{}{V_SUFFIX}", p.name), &p.v)?;
    }
    let text = crate::metadata::encode(meta);
    w.write_all(&(text.len() as u32).to_le_bytes())?;
    w.write_all(text.as_bytes())?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<u8>, NnError> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|e| NnError::Checkpoint(format!("truncated while reading {what}: {e}")))?;
    Ok(buf)
}

fn read_u16<R: Read>(r: &mut R, what: &str) -> Result<u16, NnError> {
    Ok(u16::from_le_bytes(read_exact(r, 2, what)?.try_into().unwrap()))
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32, NnError> {
    Ok(u32::from_le_bytes(read_exact(r, 4, what)?.try_into().unwrap()))
}

fn read_tensor<R: Read>(r: &mut R) -> Result<(String, Tensor), NnError> {
    let name_len = read_u16(r, "tensor name length")? as usize;
    let name =
        String::from_utf8(read_exact(r, name_len, "tensor name")?).map_err(|_| NnError::Checkpoint("tensor name is not UTF-8".into()))?;
    let rank = read_exact(r, 1, "rank")?[0] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r, "dims")? as usize);
    }
    let len: usize = shape.iter().product();
    let raw = read_exact(r, len * 4, &name)?;
    let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((name, Tensor::from_vec(&shape, data)?))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(ParamStore, Vec<(String, String)>), NnError> {
    let magic = read_exact(&mut r, 4, "magic")?;
    if magic != MAGIC {
        return Err(NnError::Checkpoint(format!("bad magic {:?}", String::from_utf8_lossy(&magic))));
    }
    let version = read_u16(&mut r, "version")?;
    if version != VERSION {
        return Err(NnError::Checkpoint(format!("unsupported version {version}")));
    }
    let step = u64::from_le_bytes(read_exact(&mut r, 8, "step")?.try_into().unwrap());
    let count = read_u32(&mut r, "tensor count")? as usize;
    if !count.is_multiple_of(3) {
        return Err(NnError::Checkpoint(format!("tensor count {count} is not a multiple of 3")));
    }
    let mut store = ParamStore::new();
    store.step = step;
    for _ in 0..count / 3 {
        let (name, value) = read_tensor(&mut r)?;
        let (mname, m) = read_tensor(&mut r)?;
        let (vname, v) = read_tensor(&mut r)?;
        if mname != format!("{name}{M_SUFFIX}") || vname != format!("{name}{V_SUFFIX}") {
            return Err(NnError::Checkpoint(format!("moments missing for {name}")));
        }
        store.push_param(Param { name, value, m, v })?;
    }
    let meta_len = read_u32(&mut r, "metadata length")? as usize;
    let text =
        String::from_utf8(read_exact(&mut r, meta_len, "metadata")?).map_err(|_| NnError::Checkpoint("metadata is not UTF-8".into()))?;
    let meta = crate::metadata::decode(&text).map_err(NnError::Checkpoint)?;
    Ok((store, meta))
}
