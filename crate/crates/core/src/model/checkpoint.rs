//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SSMK"  u16 version  u32 header_len  header JSON
//! u32 tensor_count
//! per tensor: u16 name_len, name, u8 dtype, u8 ndim, ndim x u32 dims, u64 offset
//! tensor data, row-major, offsets relative to the start of this region
//! ```
//!
//! The header carries the model config, step, epoch and rng position.
//! Optimizer moments are stored as ordinary tensors under `adam.m/` and
//! `adam.v/`.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::layers::{ParamStore, Tensor};
use super::optim::Adam;
use super::scalar::{DType, Scalar};
use super::transformer::ModelState;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SSMK";
pub const VERSION: u16 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    dtype: String,
    step: u64,
    epoch: u64,
    rng_seed: String,
    rng_stream: u64,
    rng_word_pos: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 || !s.is_ascii() {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, b) in out.iter_mut().enumerate() {
        *b = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).ok()?;
    }
    Some(out)
}

fn dtype_name(d: DType) -> &'static str {
    match d {
        DType::F32 => "f32",
        DType::F64 => "f64",
    }
}

/// Serializes the full state into checkpoint bytes.
pub fn to_bytes<T: Scalar>(state: &ModelState<T>) -> Result<Vec<u8>> {
    let header = Header {
        config: state.config.clone(),
        dtype: dtype_name(T::DTYPE).to_string(),
        step: state.step,
        epoch: state.epoch,
        rng_seed: hex(&state.rng.get_seed()),
        rng_stream: state.rng.get_stream(),
        rng_word_pos: state.rng.get_word_pos().to_string(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::format(e.to_string()))?;

    let mut entries: Vec<(String, &[usize], &[T])> = Vec::new();
    for t in &state.params.tensors {
        entries.push((t.name.clone(), &t.shape, &t.data));
    }
    for (i, t) in state.params.tensors.iter().enumerate() {
        entries.push((format!("adam.m/{}", t.name), &t.shape, &state.optimizer.m[i]));
    }
    for (i, t) in state.params.tensors.iter().enumerate() {
        entries.push((format!("adam.v/{}", t.name), &t.shape, &state.optimizer.v[i]));
    }

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (name, shape, data) in &entries {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.code());
        out.push(shape.len() as u8);
        for &d in shape.iter() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += (data.len() * T::DTYPE.size()) as u64;
    }
    for (_, _, data) in &entries {
        T::write_le(data, &mut out);
    }
    Ok(out)
}

/// Writes via a temporary sibling file and a rename.
pub fn save_checkpoint<T: Scalar>(state: &ModelState<T>, path: &Path) -> Result<()> {
    let bytes = to_bytes(state)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::format("checkpoint is truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

struct RawTensor {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    offset: u64,
}

/// A checkpoint of either precision.
#[derive(Debug, Clone)]
pub enum AnyModel {
    F32(ModelState<f32>),
    F64(ModelState<f64>),
}

impl AnyModel {
    pub fn config(&self) -> &ModelConfig {
        match self {
            AnyModel::F32(m) => &m.config,
            AnyModel::F64(m) => &m.config,
        }
    }

    /// Fails with a shape error unless the model was built for a vocabulary
    /// of `vocab_len` entries.
    pub fn check_vocab(&self, vocab_len: usize) -> Result<()> {
        let have = self.config().vocab_size;
        if have != vocab_len {
            return Err(Error::shape(format!(
                "checkpoint has vocab_size {have}, vocabulary has {vocab_len} entries"
            )));
        }
        Ok(())
    }
}

fn parse_header(bytes: &[u8]) -> Result<(Header, DType, Cursor<'_>)> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::format("not a checkpoint: bad magic bytes"));
    }
    c.take(4)?;
    let version = c.u16()?;
    if version != VERSION {
        return Err(Error::format(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let len = c.u32()? as usize;
    let header: Header = serde_json::from_slice(c.take(len)?)
        .map_err(|e| Error::format(format!("checkpoint header: {e}")))?;
    let dtype = match header.dtype.as_str() {
        "f32" => DType::F32,
        "f64" => DType::F64,
        other => return Err(Error::format(format!("unknown dtype {other:?}"))),
    };
    Ok((header, dtype, c))
}

fn decode_state<T: Scalar>(header: Header, mut c: Cursor<'_>) -> Result<ModelState<T>> {
    let count = c.u32()? as usize;
    let mut index = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let nlen = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(nlen)?)
            .map_err(|_| Error::format("tensor name is not UTF-8"))?
            .to_string();
        let dtype = DType::from_code(c.u8()?).ok_or_else(|| Error::format("unknown tensor dtype"))?;
        let ndim = c.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(c.u32()? as usize);
        }
        let offset = c.u64()?;
        index.push(RawTensor {
            name,
            dtype,
            shape,
            offset,
        });
    }
    let data = &c.buf[c.pos..];
    let mut tensors = Vec::with_capacity(index.len());
    let mut expected_offset = 0u64;
    for raw in index {
        if raw.dtype != T::DTYPE {
            return Err(Error::format(format!("tensor {} has mixed dtype", raw.name)));
        }
        if raw.offset != expected_offset {
            return Err(Error::format(format!("tensor {} has a bad offset", raw.name)));
        }
        let n: usize = raw.shape.iter().product();
        let size = T::DTYPE.size();
        let start = raw.offset as usize;
        let end = start + n * size;
        if end > data.len() {
            return Err(Error::format("checkpoint is truncated"));
        }
        let values = T::read_le(&data[start..end]);
        expected_offset = end as u64;
        tensors.push(Tensor {
            name: raw.name,
            shape: raw.shape,
            data: values,
        });
    }
    if expected_offset as usize != data.len() {
        return Err(Error::format("trailing bytes after tensor data"));
    }
    if tensors.len() % 3 != 0 {
        return Err(Error::shape("checkpoint tensor count is not params + two moments"));
    }
    let n = tensors.len() / 3;
    let v: Vec<Tensor<T>> = tensors.split_off(2 * n);
    let m: Vec<Tensor<T>> = tensors.split_off(n);
    for (p, (mt, vt)) in tensors.iter().zip(m.iter().zip(&v)) {
        if mt.name != format!("adam.m/{}", p.name)
            || vt.name != format!("adam.v/{}", p.name)
            || mt.shape != p.shape
            || vt.shape != p.shape
        {
            return Err(Error::shape(format!("optimizer moments for {} do not match", p.name)));
        }
    }
    let seed = unhex(&header.rng_seed).ok_or_else(|| Error::format("bad rng seed"))?;
    let word_pos: u128 = header
        .rng_word_pos
        .parse()
        .map_err(|_| Error::format("bad rng position"))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(header.rng_stream);
    rng.set_word_pos(word_pos);
    let params = ParamStore { tensors };
    let optimizer = Adam {
        m: m.into_iter().map(|t| t.data).collect(),
        v: v.into_iter().map(|t| t.data).collect(),
    };
    ModelState::from_parts(header.config, params, optimizer, header.step, header.epoch, rng)
}

pub fn from_bytes(bytes: &[u8]) -> Result<AnyModel> {
    let (header, dtype, c) = parse_header(bytes)?;
    Ok(match dtype {
        DType::F32 => AnyModel::F32(decode_state(header, c)?),
        DType::F64 => AnyModel::F64(decode_state(header, c)?),
    })
}

pub fn load_checkpoint(path: &Path) -> Result<AnyModel> {
    from_bytes(&fs::read(path)?)
}

/// Loads a checkpoint stored at precision `T`.
pub fn load_typed<T: Scalar>(path: &Path) -> Result<ModelState<T>> {
    let bytes = fs::read(path)?;
    let (header, dtype, c) = parse_header(&bytes)?;
    if dtype != T::DTYPE {
        return Err(Error::format(format!(
            "checkpoint stores {}, requested {}",
            dtype_name(dtype),
            dtype_name(T::DTYPE)
        )));
    }
    decode_state(header, c)
}
