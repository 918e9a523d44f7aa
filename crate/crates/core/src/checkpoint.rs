//! Single-file model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes   "KANRECKP"
//! version   u32
//! hdr_len   u64
//! header    hdr_len bytes of UTF-8 JSON (model config + per-layer shapes)
//! data_len  u64       number of f64 values that follow
//! data      data_len * 8 bytes, every parameter group of every layer in order
//! checksum  32 bytes  SHA-256 of everything above
//! ```

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::activation::BaseActivation;
use crate::error::{KanError, Result};
use crate::kan_layer::KanLayer;
use crate::mlp::{DenseActivation, DenseLayer};
use crate::model::{CfModel, Layer, ModelConfig, ModelKind};
use crate::params::Parameters;
use crate::spline::SplineGrid;

pub const MAGIC: &[u8; 8] = b"KANRECKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum LayerHeader {
    Kan {
        n_in: usize,
        n_out: usize,
        activation: BaseActivation,
        grid_min: f64,
        grid_max: f64,
        grid_count: usize,
        order: usize,
    },
    Dense {
        n_in: usize,
        n_out: usize,
        activation: DenseActivation,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    layers: Vec<LayerHeader>,
}

fn layer_header(layer: &Layer) -> LayerHeader {
    match layer {
        Layer::Kan(l) => LayerHeader::Kan {
            n_in: l.n_in(),
            n_out: l.n_out(),
            activation: l.activation(),
            grid_min: l.grid().range_min(),
            grid_max: l.grid().range_max(),
            grid_count: l.grid().grid_count(),
            order: l.grid().order(),
        },
        Layer::Dense(l) => LayerHeader::Dense { n_in: l.n_in(), n_out: l.n_out(), activation: l.activation() },
    }
}

/// Serializes a model to checkpoint bytes.
pub fn to_bytes(model: &CfModel) -> Result<Vec<u8>> {
    let header = Header { config: model.config().clone(), layers: model.layers().iter().map(layer_header).collect() };
    let header = serde_json::to_vec(&header)?;
    let values: Vec<f64> = model.layers().iter().flat_map(|l| l.param_groups().into_iter().flatten().copied().collect::<Vec<_>>()).collect();

    let mut out = Vec::with_capacity(8 + 4 + 8 + header.len() + 8 + values.len() * 8 + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in &values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len()).ok_or_else(|| {
            KanError::CorruptCheckpoint(format!("unexpected end of data at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parses checkpoint bytes; nothing is built unless the checksum verifies.
pub fn from_bytes(bytes: &[u8]) -> Result<CfModel> {
    if bytes.len() < MAGIC.len() + 4 + 8 + 8 + 32 {
        return Err(KanError::CorruptCheckpoint("file is too short".into()));
    }
    if &bytes[..8] != MAGIC {
        return Err(KanError::CorruptCheckpoint("bad magic".into()));
    }
    let (body, checksum) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != checksum {
        return Err(KanError::CorruptCheckpoint("checksum mismatch".into()));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(KanError::VersionMismatch { found: version, expected: VERSION });
    }
    let mut r = Reader { buf: body, pos: 12 };
    let hdr_len = r.u64()? as usize;
    let header: Header = serde_json::from_slice(r.take(hdr_len)?)
        .map_err(|e| KanError::CorruptCheckpoint(format!("bad header: {e}")))?;
    let n_values = r.u64()? as usize;
    let raw = r.take(n_values.checked_mul(8).ok_or_else(|| KanError::CorruptCheckpoint("length overflow".into()))?)?;
    if r.pos != body.len() {
        return Err(KanError::CorruptCheckpoint("trailing bytes".into()));
    }
    let mut values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut next = |n: usize| -> Result<Vec<f64>> {
        let v: Vec<f64> = values.by_ref().take(n).collect();
        if v.len() != n {
            return Err(KanError::CorruptCheckpoint("parameter data shorter than header".into()));
        }
        Ok(v)
    };

    let mut layers = Vec::with_capacity(header.layers.len());
    for lh in &header.layers {
        let layer = match *lh {
            LayerHeader::Kan { n_in, n_out, activation, grid_min, grid_max, grid_count, order } => {
                let grid = SplineGrid::new(grid_min, grid_max, grid_count, order)?;
                let nb = grid.basis_count();
                let scales = next(n_in * n_out)?;
                let coeffs = next(n_in * n_out * nb)?;
                Layer::Kan(KanLayer::from_parts(n_in, n_out, grid, activation, scales, coeffs)?)
            }
            LayerHeader::Dense { n_in, n_out, activation } => {
                let weights = next(n_in * n_out)?;
                let bias = next(n_out)?;
                Layer::Dense(DenseLayer::from_parts(n_in, n_out, activation, weights, bias)?)
            }
        };
        layers.push(layer);
    }
    if values.next().is_some() {
        return Err(KanError::CorruptCheckpoint("parameter data longer than header".into()));
    }
    CfModel::from_parts(header.config, layers)
}

/// Writes the checkpoint through a temporary file and a rename.
pub fn save_checkpoint(model: &CfModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(model)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<CfModel> {
    from_bytes(&fs::read(path)?)
}

/// Loads a checkpoint and checks it holds the expected model kind.
pub fn load_checkpoint_as(path: impl AsRef<Path>, kind: ModelKind) -> Result<CfModel> {
    let model = load_checkpoint(path)?;
    if model.kind() != kind {
        return Err(KanError::KindMismatch { found: model.kind().to_string(), expected: kind.to_string() });
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(kind: ModelKind) -> CfModel {
        CfModel::build(ModelConfig { kind, item_count: 9, latent_dim: 3, layers: 2, lambda: 0.01, seed: 17, ..ModelConfig::default() })
            .unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        for kind in [ModelKind::Kan, ModelKind::Mlp] {
            let m = model(kind);
            let back = from_bytes(&to_bytes(&m).unwrap()).unwrap();
            assert_eq!(m, back);
            for (a, b) in m.layers().iter().zip(back.layers()) {
                for (ga, gb) in a.param_groups().iter().zip(b.param_groups()) {
                    assert!(ga.iter().zip(gb).all(|(x, y)| x.to_bits() == y.to_bits()));
                }
            }
        }
    }

    #[test]
    fn truncation_and_corruption_are_detected() {
        let bytes = to_bytes(&model(ModelKind::Kan)).unwrap();
        for cut in [0, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(from_bytes(&bytes[..cut]), Err(KanError::CorruptCheckpoint(_))));
        }
        let mut flipped = bytes.clone();
        flipped[bytes.len() / 2] ^= 0x40;
        assert!(matches!(from_bytes(&flipped), Err(KanError::CorruptCheckpoint(_))));
    }

    #[test]
    fn version_is_checked() {
        let mut bytes = to_bytes(&model(ModelKind::Kan)).unwrap();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        let n = bytes.len();
        let digest = Sha256::digest(&bytes[..n - 32]);
        bytes[n - 32..].copy_from_slice(&digest);
        assert!(matches!(from_bytes(&bytes), Err(KanError::VersionMismatch { found: 7, .. })));
    }

    #[test]
    fn kind_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&model(ModelKind::Kan), &path).unwrap();
        assert!(matches!(load_checkpoint_as(&path, ModelKind::Mlp), Err(KanError::KindMismatch { .. })));
        assert!(load_checkpoint_as(&path, ModelKind::Kan).is_ok());
    }
}
