//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic            4 bytes  "PENC"
//! version          u32
//! vocab_size       u32
//! d_model          u32
//! n_heads          u32
//! n_layers         u32
//! ffn_mult         u32
//! max_len          u32
//! d_out            u32
//! pooling          u32      0 = mask_pooling_only, 1 = full_mask, 2 = token_subset_only
//! init_std         f64
//! metadata_len     u32
//! metadata         metadata_len bytes of UTF-8 JSON
//! tensor_count     u32
//! tensor_count × { name_len u16, name, rank u32, dims u64 × rank, data f64 × Π dims }
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::params::EncoderParams;
use super::{EncoderConfig, PoolingStrategy};
use crate::error::{Error, Result};
use crate::numerics::{ParamTensors, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PENC";
pub const CHECKPOINT_VERSION: u32 = 1;

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in u32")))
}

pub fn write_checkpoint<W: Write>(
    mut w: W,
    params: &EncoderParams,
    metadata: &serde_json::Value,
) -> Result<()> {
    let cfg = &params.config;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for (v, name) in [
        (cfg.vocab_size, "vocab_size"),
        (cfg.d_model, "d_model"),
        (cfg.n_heads, "n_heads"),
        (cfg.n_layers, "n_layers"),
        (cfg.ffn_mult, "ffn_mult"),
        (cfg.max_len, "max_len"),
        (cfg.d_out, "d_out"),
    ] {
        w.write_all(&u32_of(v, name)?.to_le_bytes())?;
    }
    w.write_all(&cfg.pooling.code().to_le_bytes())?;
    w.write_all(&cfg.init_std.to_le_bytes())?;

    let meta = serde_json::to_vec(metadata)?;
    w.write_all(&u32_of(meta.len(), "metadata length")?.to_le_bytes())?;
    w.write_all(&meta)?;

    let named = params.named_tensors();
    w.write_all(&u32_of(named.len(), "tensor count")?.to_le_bytes())?;
    for (name, t) in named {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Format(format!("tensor name too long: {name}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&u32_of(t.rank(), "rank")?.to_le_bytes())?;
        for &dim in t.shape() {
            w.write_all(&(dim as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
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
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
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

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(EncoderParams, serde_json::Value)> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not an encoder checkpoint (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut dims = [0usize; 7];
    for d in dims.iter_mut() {
        *d = c.u32()? as usize;
    }
    let pooling = PoolingStrategy::from_code(c.u32()?)?;
    let init_std = c.f64()?;
    let config = EncoderConfig {
        vocab_size: dims[0],
        d_model: dims[1],
        n_heads: dims[2],
        n_layers: dims[3],
        ffn_mult: dims[4],
        max_len: dims[5],
        d_out: dims[6],
        pooling,
        init_std,
    };
    config
        .validate()
        .map_err(|e| Error::Format(format!("bad config header: {e}")))?;

    let meta_len = c.u32()? as usize;
    let metadata: serde_json::Value = serde_json::from_slice(c.take(meta_len)?)?;

    // Shapes come from a freshly built skeleton; stored tensors must match it.
    let mut params = EncoderParams::init(config, 0)?;
    let expected: Vec<(String, Vec<usize>)> = params
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    let count = c.u32()? as usize;
    if count != expected.len() {
        return Err(Error::Format(format!(
            "checkpoint has {count} tensors, config implies {}",
            expected.len()
        )));
    }
    let mut loaded = Vec::with_capacity(count);
    for (want_name, want_shape) in &expected {
        let name_len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        if name != want_name {
            return Err(Error::Format(format!(
                "expected tensor {want_name}, found {name}"
            )));
        }
        let rank = c.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u64()? as usize);
        }
        if &shape != want_shape {
            return Err(Error::Format(format!(
                "tensor {name}: shape {shape:?}, expected {want_shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(c.f64()?);
        }
        loaded.push(Tensor::new(shape, data)?);
    }
    if c.pos != buf.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    for (slot, t) in params.tensors_mut().into_iter().zip(loaded) {
        *slot = t;
    }
    if !params.all_finite() {
        return Err(Error::Format("checkpoint contains non-finite weights".into()));
    }
    Ok((params, metadata))
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    params: &EncoderParams,
    metadata: &serde_json::Value,
) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, params, metadata)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(EncoderParams, serde_json::Value)> {
    read_checkpoint(fs::File::open(path)?)
}
