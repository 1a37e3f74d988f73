//! Versioned binary model checkpoints.
//!
//! Layout: `b"FLRA"`, format version (u32), endianness marker (u8, 1 =
//! little), head tag (u8), activation tag (u8), layer count (u32), the
//! `layers + 1` layer widths (u32 each), then for every layer its weight
//! matrix row-major followed by its bias, all as little-endian f64. Integers
//! are little-endian too.

use std::path::Path;

use fedrobust::model::{Activation, Head, ModelParams};
use fedrobust::numerics::{Matrix, Vector};
use thiserror::Error;

use crate::error::{CliError, CliResult};

pub const MAGIC: [u8; 4] = *b"FLRA";
pub const VERSION: u32 = 1;
const LITTLE_ENDIAN: u8 = 1;
/// Rejects absurd headers before allocating.
const MAX_WIDTH: u32 = 1 << 24;

#[derive(Debug, Error, PartialEq)]
pub enum CheckpointError {
    #[error("bad magic {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("format version {found}, expected {VERSION}")]
    VersionMismatch { found: u32 },
    #[error("truncated: need {needed} bytes, have {found}")]
    Truncated { needed: usize, found: usize },
    #[error("unknown {field} tag {value}")]
    UnknownTag { field: &'static str, value: u8 },
    #[error("invalid header: {0}")]
    Invalid(String),
    #[error("{0} trailing bytes")]
    TrailingBytes(usize),
}

fn head_tag(h: Head) -> u8 {
    match h {
        Head::SoftmaxXent => 0,
        Head::SquaredError => 1,
    }
}

fn activation_tag(a: Activation) -> u8 {
    match a {
        Activation::Elu => 0,
        Activation::Relu => 1,
    }
}

pub fn encode(p: &ModelParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + 8 * p.num_params());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(LITTLE_ENDIAN);
    out.push(head_tag(p.head));
    out.push(activation_tag(p.activation));
    out.extend_from_slice(&(p.num_layers() as u32).to_le_bytes());
    for &d in &p.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for (w, b) in p.weights.iter().zip(&p.biases) {
        for r in 0..w.rows() {
            w.row(r)
                .iter()
                .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        b.iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let needed = self.pos + n;
        let chunk = self
            .bytes
            .get(self.pos..needed)
            .ok_or(CheckpointError::Truncated {
                needed,
                found: self.bytes.len(),
            })?;
        self.pos = needed;
        Ok(chunk)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        Ok(self
            .take(8 * n)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<ModelParams, CheckpointError> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = c.take(4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic { found: magic });
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch { found: version });
    }
    let endian = c.u8()?;
    if endian != LITTLE_ENDIAN {
        return Err(CheckpointError::UnknownTag {
            field: "endianness",
            value: endian,
        });
    }
    let head = match c.u8()? {
        0 => Head::SoftmaxXent,
        1 => Head::SquaredError,
        v => {
            return Err(CheckpointError::UnknownTag {
                field: "head",
                value: v,
            })
        }
    };
    let activation = match c.u8()? {
        0 => Activation::Elu,
        1 => Activation::Relu,
        v => {
            return Err(CheckpointError::UnknownTag {
                field: "activation",
                value: v,
            })
        }
    };
    let layers = c.u32()?;
    if layers == 0 || layers > 1024 {
        return Err(CheckpointError::Invalid(format!("layer count {layers}")));
    }
    let mut dims = Vec::with_capacity(layers as usize + 1);
    for _ in 0..=layers {
        let d = c.u32()?;
        if d == 0 || d > MAX_WIDTH {
            return Err(CheckpointError::Invalid(format!("layer width {d}")));
        }
        dims.push(d as usize);
    }
    let mut p = ModelParams::zeros(&dims, activation, head)
        .map_err(|e| CheckpointError::Invalid(e.to_string()))?;
    for k in 0..layers as usize {
        let (rows, cols) = (dims[k + 1], dims[k]);
        let w = c.f64s(rows * cols)?;
        p.weights[k] = Matrix::from_fn(rows, cols, |i, j| w[i * cols + j]);
        p.biases[k] = Vector::from_vec(c.f64s(rows)?);
    }
    if c.pos != bytes.len() {
        return Err(CheckpointError::TrailingBytes(bytes.len() - c.pos));
    }
    Ok(p)
}

pub fn checkpoint_write(p: &ModelParams, path: &Path) -> CliResult<()> {
    std::fs::write(path, encode(p)).map_err(|e| CliError::io(path, e))
}

pub fn checkpoint_read(path: &Path) -> CliResult<ModelParams> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes).map_err(|source| CliError::Checkpoint {
        path: path.to_path_buf(),
        source,
    })
}
