//! Frame sequences and their binary file format.
//!
//! File layout: `DLTR`, one version byte, `K` and `D` as little-endian `u32`,
//! then `K*D` little-endian `f32` values in frame-major order.

use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"DLTR";
const VERSION: u8 = 1;

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("trace io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a trace file (bad magic)")]
    BadMagic,
    #[error("unsupported trace version {0}")]
    BadVersion(u8),
    #[error("invalid trace: {0}")]
    Invalid(String),
}

/// `frames x dim` values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    frames: usize,
    dim: usize,
    data: Vec<f64>,
}

impl Trace {
    pub fn new(frames: usize, dim: usize, data: Vec<f64>) -> Result<Self, TraceError> {
        if frames == 0 || dim == 0 {
            return Err(TraceError::Invalid(format!("empty trace {frames}x{dim}")));
        }
        if data.len() != frames * dim {
            return Err(TraceError::Invalid(format!(
                "{frames}x{dim} trace with {} values",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(TraceError::Invalid(format!("value {v} outside [0,1]")));
        }
        Ok(Self { frames, dim, data })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn frame(&self, k: usize) -> &[f64] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    /// Pads by repeating the last frame, or truncates, to exactly `frames`.
    pub fn fit_length(&self, frames: usize) -> Trace {
        let mut data = Vec::with_capacity(frames * self.dim);
        for k in 0..frames {
            data.extend_from_slice(self.frame(k.min(self.frames - 1)));
        }
        Trace {
            frames,
            dim: self.dim,
            data,
        }
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), TraceError> {
        let mut buf = Vec::with_capacity(13 + 4 * self.data.len());
        buf.extend_from_slice(MAGIC);
        buf.push(VERSION);
        buf.extend_from_slice(&(self.frames as u32).to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for &v in &self.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, TraceError> {
        let mut head = [0u8; 13];
        r.read_exact(&mut head)?;
        if &head[..4] != MAGIC {
            return Err(TraceError::BadMagic);
        }
        if head[4] != VERSION {
            return Err(TraceError::BadVersion(head[4]));
        }
        let k = u32::from_le_bytes(head[5..9].try_into().unwrap()) as usize;
        let d = u32::from_le_bytes(head[9..13].try_into().unwrap()) as usize;
        let mut body = vec![0u8; k * d * 4];
        r.read_exact(&mut body)?;
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Self::new(k, d, data)
    }

    pub fn save(&self, path: &Path) -> Result<(), TraceError> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self, TraceError> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

/// Rounds to the nearest `f32`, the precision traces are stored at.
pub fn to_storage_precision(v: f64) -> f64 {
    v as f32 as f64
}
