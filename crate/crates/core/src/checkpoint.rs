//! Flat binary parameter checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic        8 bytes   "LAVACKPT"
//! version      u32       1
//! mode         u8        0 = last-layer, 1 = context
//! input_dim    u32
//! output_dim   u32
//! context_dim  u32
//! n_hidden     u32
//! widths       u32 × n_hidden
//! n_tensors    u32
//! tensors      n_tensors × { rows u32, cols u32, rows·cols × f64 }
//! ```
//!
//! Tensors follow [`MetaParams::tensors`] order.

use std::path::Path;

use thiserror::Error;

use crate::model::{AdaptMode, Architecture, MetaParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"LAVACKPT";
pub const VERSION: u32 = 1;
const MAX_DIM: u32 = 1 << 20;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated at byte {offset}")]
    Truncated { offset: usize },
    #[error("invalid checkpoint: {0}")]
    Invalid(String),
    #[error("architecture mismatch in tensor {tensor}: expected {expected}, found {found}")]
    ArchMismatch {
        tensor: String,
        expected: String,
        found: String,
    },
    #[error("checkpoint i/o at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub fn encode(params: &MetaParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + params.num_parameters() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(match params.mode {
        AdaptMode::LastLayer => 0,
        AdaptMode::Context => 1,
    });
    let arch = &params.arch;
    for v in [arch.input_dim, arch.output_dim, arch.context_dim, arch.hidden.len()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for &w in &arch.hidden {
        out.extend_from_slice(&(w as u32).to_le_bytes());
    }
    let tensors = params.tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(CheckpointError::Truncated { offset: self.pos })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn dim(&mut self, what: &str) -> Result<usize, CheckpointError> {
        let v = self.u32()?;
        if v > MAX_DIM {
            return Err(CheckpointError::Invalid(format!("{what} {v} exceeds {MAX_DIM}")));
        }
        Ok(v as usize)
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

/// Decodes a checkpoint, validating its structure against its own header.
pub fn decode(bytes: &[u8]) -> Result<MetaParams, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len()).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let mode = match r.u8()? {
        0 => AdaptMode::LastLayer,
        1 => AdaptMode::Context,
        m => return Err(CheckpointError::Invalid(format!("unknown mode byte {m}"))),
    };
    let input_dim = r.dim("input_dim")?;
    let output_dim = r.dim("output_dim")?;
    let context_dim = r.dim("context_dim")?;
    let n_hidden = r.dim("n_hidden")?;
    if n_hidden.saturating_mul(4) > r.remaining() {
        return Err(CheckpointError::Truncated { offset: r.pos });
    }
    let hidden = (0..n_hidden)
        .map(|_| r.dim("hidden width"))
        .collect::<Result<Vec<_>, _>>()?;
    let arch = Architecture {
        input_dim,
        output_dim,
        hidden,
        context_dim,
    };
    arch.validate(mode)
        .map_err(|e| CheckpointError::Invalid(e.to_string()))?;

    let expected = MetaParams::expected_shapes(&arch, mode);
    let names = MetaParams::names_for(arch.hidden.len(), mode == AdaptMode::Context);
    let n_tensors = r.u32()? as usize;
    if n_tensors != expected.len() {
        return Err(CheckpointError::Invalid(format!(
            "header declares {} tensors, architecture needs {}",
            n_tensors,
            expected.len()
        )));
    }
    let mut tensors = Vec::with_capacity(n_tensors);
    for (shape, name) in expected.iter().zip(&names) {
        let rows = r.dim("rows")?;
        let cols = r.dim("cols")?;
        if (rows, cols) != *shape {
            return Err(CheckpointError::ArchMismatch {
                tensor: name.clone(),
                expected: format!("{}x{}", shape.0, shape.1),
                found: format!("{rows}x{cols}"),
            });
        }
        let n = rows * cols;
        if n.saturating_mul(8) > r.remaining() {
            return Err(CheckpointError::Truncated { offset: r.pos });
        }
        let data: Vec<f64> = r
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(rows, cols, data)
            .map_err(|_| CheckpointError::Invalid(format!("non-finite value in tensor {name}")))?;
        tensors.push(t);
    }
    if r.remaining() != 0 {
        return Err(CheckpointError::Invalid(format!(
            "{} trailing bytes after last tensor",
            r.remaining()
        )));
    }
    MetaParams::from_tensors(&arch, mode, tensors).map_err(|e| CheckpointError::Invalid(e.to_string()))
}

/// Decodes and checks that the stored model matches `arch` and `mode`.
pub fn decode_expecting(
    bytes: &[u8],
    arch: &Architecture,
    mode: AdaptMode,
) -> Result<MetaParams, CheckpointError> {
    let params = decode(bytes)?;
    if params.mode != mode {
        return Err(CheckpointError::ArchMismatch {
            tensor: "mode".into(),
            expected: format!("{mode:?}"),
            found: format!("{:?}", params.mode),
        });
    }
    let want = MetaParams::expected_shapes(arch, mode);
    let names = MetaParams::names_for(arch.hidden.len(), mode == AdaptMode::Context);
    let have: Vec<_> = params.tensors().iter().map(|t| t.shape()).collect();
    for (i, name) in names.iter().enumerate() {
        match (want.get(i), have.get(i)) {
            (Some(w), Some(h)) if w == h => {}
            (w, h) => {
                return Err(CheckpointError::ArchMismatch {
                    tensor: name.clone(),
                    expected: w.map_or("absent".into(), |s| format!("{}x{}", s.0, s.1)),
                    found: h.map_or("absent".into(), |s| format!("{}x{}", s.0, s.1)),
                })
            }
        }
    }
    if have.len() > want.len() {
        return Err(CheckpointError::ArchMismatch {
            tensor: params.tensor_names()[want.len()].clone(),
            expected: "absent".into(),
            found: "present".into(),
        });
    }
    Ok(params)
}

pub fn save(path: &Path, params: &MetaParams) -> Result<(), CheckpointError> {
    std::fs::write(path, encode(params)).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load(path: &Path) -> Result<MetaParams, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::SeedTree;

    fn sample(mode: AdaptMode) -> MetaParams {
        let arch = match mode {
            AdaptMode::LastLayer => Architecture::new(2, 3).with_hidden(&[5, 4]),
            AdaptMode::Context => Architecture::new(1, 1).with_hidden(&[6]).with_context(2),
        };
        MetaParams::init(SeedTree::new(1), &arch, mode).unwrap()
    }

    #[test]
    fn roundtrip_is_bitwise() {
        for mode in [AdaptMode::LastLayer, AdaptMode::Context] {
            let p = sample(mode);
            let bytes = encode(&p);
            assert_eq!(decode(&bytes).unwrap(), p);
        }
    }

    #[test]
    fn corrupt_magic_rejected() {
        let mut bytes = encode(&sample(AdaptMode::LastLayer));
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(CheckpointError::BadMagic)));
        assert!(matches!(decode(b"LAV"), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn truncation_and_trailing_bytes_rejected() {
        let bytes = encode(&sample(AdaptMode::Context));
        for cut in [12, 20, bytes.len() - 1] {
            assert!(decode(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode(&extra), Err(CheckpointError::Invalid(_))));
    }

    #[test]
    fn mismatch_names_tensor() {
        let p = sample(AdaptMode::LastLayer);
        let bytes = encode(&p);
        let other = Architecture::new(2, 3).with_hidden(&[5, 7]);
        match decode_expecting(&bytes, &other, AdaptMode::LastLayer) {
            Err(CheckpointError::ArchMismatch { tensor, .. }) => assert_eq!(tensor, "hidden.1.weight"),
            r => panic!("unexpected {r:?}"),
        }
        match decode_expecting(&bytes, &p.arch, AdaptMode::Context) {
            Err(CheckpointError::ArchMismatch { tensor, .. }) => assert_eq!(tensor, "mode"),
            r => panic!("unexpected {r:?}"),
        }
    }

    #[test]
    fn oversized_dimension_does_not_allocate() {
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.push(0);
        for v in [1u32, 1, 0, 1, 1 << 20, 3] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for v in [1u32, 1 << 20] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        assert!(matches!(decode(&bytes), Err(CheckpointError::Truncated { .. })));
    }
}
