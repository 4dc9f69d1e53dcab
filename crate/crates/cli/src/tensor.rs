//! `TensorFile`: a small dense-array container.
//!
//! Layout, all little-endian: magic `ARTL`, version `u32` (1), dtype `u32`
//! (0 = f32, 1 = f64), rank `u32`, `rank` dims as `u64`, then the row-major
//! payload. Nothing may follow the payload.

use std::path::Path;

use crate::error::{CliError, CliResult};

pub const MAGIC: &[u8; 4] = b"ARTL";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn code(self) -> u32 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    /// Values widened to f64 regardless of the stored dtype.
    pub values: Vec<f64>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.at.checked_add(n)?;
        let out = self.bytes.get(self.at..end)?;
        self.at = end;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

impl Tensor {
    pub fn new(dims: Vec<usize>, values: Vec<f64>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), values.len());
        Self { dims, values }
    }

    pub fn decode(bytes: &[u8]) -> CliResult<Self> {
        let bad = |m: &str| CliError::TensorHeader(m.to_string());
        let mut c = Cursor { bytes, at: 0 };
        if c.take(4) != Some(MAGIC.as_slice()) {
            return Err(bad("missing ARTL magic"));
        }
        let version = c.u32().ok_or_else(|| bad("truncated header"))?;
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let dtype = match c.u32().ok_or_else(|| bad("truncated header"))? {
            0 => Dtype::F32,
            1 => Dtype::F64,
            other => return Err(bad(&format!("unknown dtype code {other}"))),
        };
        let rank = c.u32().ok_or_else(|| bad("truncated header"))? as usize;
        let mut dims = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            let d = c.u64().ok_or_else(|| bad("truncated dims"))?;
            dims.push(usize::try_from(d).map_err(|_| bad("dimension overflows usize"))?);
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| bad("element count overflows"))?;
        let payload = count
            .checked_mul(dtype.width())
            .and_then(|n| c.take(n))
            .ok_or_else(|| CliError::Format(format!("tensor payload shorter than {count} elements")))?;
        if c.at != bytes.len() {
            return Err(CliError::Format(format!("{} trailing bytes after tensor payload", bytes.len() - c.at)));
        }
        let values = match dtype {
            Dtype::F32 => payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect(),
            Dtype::F64 => payload
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        };
        Ok(Self { dims, values })
    }

    pub fn encode(&self, dtype: Dtype) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.dims.len() + dtype.width() * self.values.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&dtype.code().to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &self.values {
            match dtype {
                Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
        out
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            CliError::TensorHeader(m) => CliError::TensorHeader(format!("{}: {m}", path.display())),
            CliError::Format(m) => CliError::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn write(&self, path: &Path, dtype: Dtype) -> CliResult<()> {
        std::fs::write(path, self.encode(dtype)).map_err(|e| CliError::io(path, e))
    }

    /// Splits a rank-3 `[T, U + 1, D]` tensor into its dimensions.
    pub fn lattice_dims(&self) -> CliResult<(usize, usize, usize)> {
        match self.dims[..] {
            [t, rows, d] if t > 0 && rows > 0 && d > 0 => Ok((t, rows - 1, d)),
            _ => Err(CliError::Format(format!(
                "expected a [T, U+1, D] lattice with positive dims, got {:?}",
                self.dims
            ))),
        }
    }
}
