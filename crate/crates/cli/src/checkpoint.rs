//! Toy-model checkpoints: a versioned flat binary of named f64 tensors.
//!
//! Layout, little-endian: magic `ARTM`, version `u32` (1), vocabulary size,
//! blank id and eos id (`u32`, eos `u32::MAX` when absent), then the hidden,
//! embedding and joint widths (`u32`), the tensor count (`u32`), and per
//! tensor: name length `u32`, UTF-8 name, rank `u32`, dims `u64`, payload.

use std::path::Path;

use artl_core::toy::{ModelDims, Params, ToyModel, FEATURES, PARAM_NAMES};
use artl_core::Vocab;

use crate::error::{CliError, CliResult};

const MAGIC: &[u8; 4] = b"ARTM";
const VERSION: u32 = 1;
const NO_EOS: u32 = u32::MAX;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn encode(model: &ToyModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION as usize);
    put_u32(&mut out, model.vocab.size());
    put_u32(&mut out, model.vocab.blank());
    out.extend_from_slice(&model.vocab.eos().map_or(NO_EOS, |e| e as u32).to_le_bytes());
    for v in [model.dims.hidden, model.dims.embed, model.dims.joint] {
        put_u32(&mut out, v);
    }
    put_u32(&mut out, PARAM_NAMES.len());
    let shapes = Params::shapes(&model.dims);
    for ((name, shape), values) in PARAM_NAMES.iter().zip(&shapes).zip(model.params.tensors()) {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, shape.len());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> CliResult<&'a [u8]> {
        let out = self
            .at
            .checked_add(n)
            .and_then(|end| self.bytes.get(self.at..end))
            .ok_or_else(|| CliError::Format("truncated checkpoint".into()))?;
        self.at += n;
        Ok(out)
    }

    fn u32(&mut self) -> CliResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> CliResult<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> CliResult<ToyModel> {
    let bad = |m: String| CliError::Format(format!("bad checkpoint: {m}"));
    let mut r = Reader { bytes, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(bad("missing ARTM magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let size = r.u32()? as usize;
    let blank = r.u32()? as usize;
    let eos = match r.u32()? {
        NO_EOS => None,
        e => Some(e as usize),
    };
    let vocab = Vocab::new(size, blank, eos)?;
    let dims = ModelDims {
        features: FEATURES,
        hidden: r.u32()? as usize,
        embed: r.u32()? as usize,
        joint: r.u32()? as usize,
        vocab: size,
    };
    let count = r.u32()? as usize;
    if count != PARAM_NAMES.len() {
        return Err(bad(format!("expected {} tensors, found {count}", PARAM_NAMES.len())));
    }
    let mut params = Params::zeros(&dims);
    let shapes = Params::shapes(&dims);
    for ((name, shape), slot) in PARAM_NAMES.iter().zip(&shapes).zip(params.tensors_mut()) {
        let len = r.u32()? as usize;
        let got = std::str::from_utf8(r.take(len)?).map_err(|_| bad("tensor name is not UTF-8".into()))?;
        if got != *name {
            return Err(bad(format!("expected tensor {name:?}, found {got:?}")));
        }
        let rank = r.u32()? as usize;
        let stored: Vec<u64> = (0..rank).map(|_| r.u64()).collect::<CliResult<_>>()?;
        if stored.iter().map(|&d| d as usize).ne(shape.iter().copied()) {
            return Err(bad(format!("tensor {name:?} has shape {stored:?}, expected {shape:?}")));
        }
        for v in slot.iter_mut() {
            *v = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
        }
    }
    if r.at != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - r.at)));
    }
    Ok(ToyModel { dims, vocab, params })
}

pub fn save(model: &ToyModel, path: &Path) -> CliResult<()> {
    std::fs::write(path, encode(model)).map_err(|e| CliError::io(path, e))
}

pub fn load(path: &Path) -> CliResult<ToyModel> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes).map_err(|e| CliError::Format(format!("{}: {e}", path.display())))
}
