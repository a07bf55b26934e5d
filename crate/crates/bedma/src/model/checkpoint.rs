//! Binary serialization of trained models.
//!
//! Layout: the magic bytes `BSFC`, a little-endian `u32` format
//! version, a length-prefixed JSON metadata document (config,
//! normalization statistics, training summary), then one entry per
//! parameter tensor: name length (`u32`), name bytes, rank (`u32`),
//! extents (`u64` each), and the raw values as little-endian IEEE-754
//! binary64. Values survive a round trip bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{build_model, Model, ModelConfig, ModelError, TrainInfo, Variant};
use crate::autodiff::Tensor;
use crate::data::NormStats;

const MAGIC: &[u8; 4] = b"BSFC";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("corrupt checkpoint: {detail}")]
    Corrupt { detail: String },
    #[error("checkpoint is missing parameter {name:?}")]
    MissingParameter { name: String },
    #[error("checkpoint has unexpected parameter {name:?}")]
    UnexpectedParameter { name: String },
    #[error("checkpoint repeats parameter {name:?}")]
    DuplicateParameter { name: String },
    #[error("parameter {name:?} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint holds variant {found}, but {requested} was requested")]
    VariantMismatch { requested: Variant, found: Variant },
    #[error(transparent)]
    Metadata(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    config: ModelConfig,
    stats: Option<NormStats>,
    train_info: Option<TrainInfo>,
}

fn append_entry(buf: &mut Vec<u8>, name: &str, tensor: &Tensor) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
    for &extent in tensor.shape() {
        buf.extend_from_slice(&(extent as u64).to_le_bytes());
    }
    for &value in tensor.data() {
        buf.extend_from_slice(&value.to_le_bytes());
    }
}

/// Serializes a model to checkpoint bytes.
pub fn write_checkpoint(model: &Model) -> Result<Vec<u8>, CheckpointError> {
    let meta = serde_json::to_vec(&Metadata {
        config: model.cfg.clone(),
        stats: model.stats,
        train_info: model.train_info.clone(),
    })?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    buf.extend_from_slice(&meta);
    for (name, tensor) in model.param_entries() {
        append_entry(&mut buf, &name, tensor);
    }
    Ok(buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let slice = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(slice)
            }
            None => Err(CheckpointError::Corrupt {
                detail: format!("truncated while reading {what}"),
            }),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn read_entry(cur: &mut Cursor) -> Result<(String, Tensor), CheckpointError> {
    let name_len = cur.u32("parameter name length")? as usize;
    let name_bytes = cur.take(name_len, "parameter name")?;
    let name = std::str::from_utf8(name_bytes)
        .map_err(|_| CheckpointError::Corrupt {
            detail: "parameter name is not UTF-8".into(),
        })?
        .to_string();
    let rank = cur.u32("rank")? as usize;
    if rank > 2 {
        return Err(CheckpointError::Corrupt {
            detail: format!("parameter {name:?} claims rank {rank}"),
        });
    }
    let mut shape = Vec::with_capacity(rank);
    let mut count: usize = 1;
    for _ in 0..rank {
        let extent = cur.u64("extent")? as usize;
        count = count.checked_mul(extent).ok_or(CheckpointError::Corrupt {
            detail: format!("parameter {name:?} extents overflow"),
        })?;
        shape.push(extent);
    }
    let raw = cur.take(count * 8, "parameter values")?;
    let data: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let tensor = Tensor::new(shape, data).map_err(|e| CheckpointError::Corrupt {
        detail: format!("parameter {name:?}: {e}"),
    })?;
    Ok((name, tensor))
}

/// Reconstructs a model from checkpoint bytes.
pub fn read_checkpoint(bytes: &[u8]) -> Result<Model, CheckpointError> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic").map(|m| m != MAGIC).unwrap_or(true) {
        return Err(CheckpointError::BadMagic);
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion { found: version });
    }
    let meta_len = cur.u64("metadata length")? as usize;
    let meta_bytes = cur.take(meta_len, "metadata")?;
    let meta: Metadata = serde_json::from_slice(meta_bytes)?;

    let mut entries: Vec<(String, Tensor)> = Vec::new();
    while !cur.done() {
        let (name, tensor) = read_entry(&mut cur)?;
        if entries.iter().any(|(n, _)| *n == name) {
            return Err(CheckpointError::DuplicateParameter { name });
        }
        entries.push((name, tensor));
    }

    let mut model = build_model(&meta.config, 0)?;
    for (name, slot) in model.param_entries_mut() {
        let found = entries.iter().position(|(n, _)| *n == name);
        let Some(idx) = found else {
            return Err(CheckpointError::MissingParameter { name });
        };
        let (_, tensor) = entries.swap_remove(idx);
        if tensor.shape() != slot.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name,
                expected: slot.shape().to_vec(),
                found: tensor.shape().to_vec(),
            });
        }
        *slot = tensor;
    }
    if let Some((name, _)) = entries.into_iter().next() {
        return Err(CheckpointError::UnexpectedParameter { name });
    }
    model.stats = meta.stats;
    model.train_info = meta.train_info;
    Ok(model)
}

/// Writes a model to a checkpoint file.
pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let bytes = write_checkpoint(model)?;
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads a model back from a checkpoint file.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model, CheckpointError> {
    let bytes = fs::read(path)?;
    read_checkpoint(&bytes)
}

/// Like [`load_checkpoint`], but fails when the stored variant is not
/// the requested one.
pub fn load_checkpoint_expecting(
    path: impl AsRef<Path>,
    variant: Variant,
) -> Result<Model, CheckpointError> {
    let model = load_checkpoint(path)?;
    if model.cfg.variant != variant {
        return Err(CheckpointError::VariantMismatch {
            requested: variant,
            found: model.cfg.variant,
        });
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::variational::NoiseSource;

    fn sample_model() -> Model {
        let cfg = ModelConfig {
            variant: Variant::Bedma,
            layers: 2,
            hidden: 4,
            heads: 2,
            window: 3,
            horizon: 2,
            input_width: 1,
            prior: Default::default(),
            sigma_init: 0.05,
        };
        let mut model = build_model(&cfg, 99).unwrap();
        model.stats = Some(NormStats {
            min: 10.0,
            max: 90.0,
        });
        model.train_info = Some(TrainInfo {
            epochs_run: 25,
            best_epoch: 17,
            final_train_loss: 0.012,
            final_val_loss: 0.019,
            seed: 99,
        });
        model
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let model = sample_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bsfc");
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();

        assert_eq!(loaded.cfg, model.cfg);
        assert_eq!(loaded.stats, model.stats);
        assert_eq!(loaded.train_info, model.train_info);
        let a = model.param_entries();
        let b = loaded.param_entries();
        assert_eq!(a.len(), b.len());
        for ((name_a, t_a), (name_b, t_b)) in a.iter().zip(&b) {
            assert_eq!(name_a, name_b);
            assert_eq!(t_a.shape(), t_b.shape());
            for (x, y) in t_a.data().iter().zip(t_b.data()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{name_a} drifted");
            }
        }
    }

    #[test]
    fn round_trip_preserves_forward_passes() {
        let model = sample_model();
        let bytes = write_checkpoint(&model).unwrap();
        let loaded = read_checkpoint(&bytes).unwrap();
        for seed in 0..5u64 {
            let window = Tensor::new(
                vec![3, 1],
                NoiseSource::seeded(seed).uniform("w", 3, 0.0, 1.0),
            )
            .unwrap();
            let mut n1 = NoiseSource::seeded(seed + 77);
            let mut n2 = NoiseSource::seeded(seed + 77);
            let (y1, kl1) = model.forward_values(&window, &mut n1).unwrap();
            let (y2, kl2) = loaded.forward_values(&window, &mut n2).unwrap();
            assert_eq!(y1.max_abs_diff(&y2), 0.0);
            assert_eq!(kl1.to_bits(), kl2.to_bits());
        }
    }

    #[test]
    fn serialization_is_deterministic() {
        let model = sample_model();
        assert_eq!(
            write_checkpoint(&model).unwrap(),
            write_checkpoint(&model).unwrap()
        );
    }

    #[test]
    fn truncation_anywhere_is_rejected_cleanly() {
        let bytes = write_checkpoint(&sample_model()).unwrap();
        for cut in [3, 7, 11, 40, bytes.len() / 2, bytes.len() - 1] {
            let err = read_checkpoint(&bytes[..cut]).unwrap_err();
            assert!(
                matches!(
                    err,
                    CheckpointError::BadMagic
                        | CheckpointError::Corrupt { .. }
                        | CheckpointError::Metadata(_)
                        | CheckpointError::MissingParameter { .. }
                ),
                "cut at {cut} gave {err:?}"
            );
        }
    }

    #[test]
    fn bad_magic_and_version_are_rejected() {
        let mut bytes = write_checkpoint(&sample_model()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            read_checkpoint(&bytes),
            Err(CheckpointError::BadMagic)
        ));

        let mut bytes = write_checkpoint(&sample_model()).unwrap();
        bytes[4..8].copy_from_slice(&9u32.to_le_bytes());
        assert!(matches!(
            read_checkpoint(&bytes),
            Err(CheckpointError::UnsupportedVersion { found: 9 })
        ));
    }

    #[test]
    fn duplicate_and_unknown_entries_are_rejected() {
        let model = sample_model();
        let mut bytes = write_checkpoint(&model).unwrap();
        let (last_name, last_tensor) = model.param_entries().pop().unwrap();
        append_entry(&mut bytes, &last_name, last_tensor);
        assert!(matches!(
            read_checkpoint(&bytes),
            Err(CheckpointError::DuplicateParameter { name }) if name == last_name
        ));

        let mut bytes = write_checkpoint(&model).unwrap();
        append_entry(&mut bytes, "mystery.w", &Tensor::zeros(&[2]));
        assert!(matches!(
            read_checkpoint(&bytes),
            Err(CheckpointError::UnexpectedParameter { name }) if name == "mystery.w"
        ));
    }

    #[test]
    fn missing_entry_and_shape_drift_are_rejected() {
        let model = sample_model();
        let entries = model.param_entries();

        let meta = serde_json::to_vec(&Metadata {
            config: model.cfg.clone(),
            stats: None,
            train_info: None,
        })
        .unwrap();
        let header = |meta: &[u8]| {
            let mut buf = Vec::new();
            buf.extend_from_slice(MAGIC);
            buf.extend_from_slice(&VERSION.to_le_bytes());
            buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
            buf.extend_from_slice(meta);
            buf
        };

        let mut bytes = header(&meta);
        for (name, tensor) in entries.iter().take(entries.len() - 1) {
            append_entry(&mut bytes, name, tensor);
        }
        assert!(matches!(
            read_checkpoint(&bytes),
            Err(CheckpointError::MissingParameter { .. })
        ));

        let mut bytes = header(&meta);
        for (i, (name, tensor)) in entries.iter().enumerate() {
            if i == 0 {
                let flipped = Tensor::new(
                    vec![tensor.cols(), tensor.rows()],
                    tensor.data().to_vec(),
                )
                .unwrap();
                append_entry(&mut bytes, name, &flipped);
            } else {
                append_entry(&mut bytes, name, tensor);
            }
        }
        assert!(matches!(
            read_checkpoint(&bytes),
            Err(CheckpointError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn variant_request_must_match() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bsfc");
        save_checkpoint(&sample_model(), &path).unwrap();
        load_checkpoint_expecting(&path, Variant::Bedma).unwrap();
        assert!(matches!(
            load_checkpoint_expecting(&path, Variant::GruEd),
            Err(CheckpointError::VariantMismatch { .. })
        ));
    }
}
