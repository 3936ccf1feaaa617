//! Model checkpoint serialization.
//!
//! Layout: magic `RPLM`, format version u32, length-prefixed JSON
//! `ModelConfig`, then every weight tensor as little-endian 32-bit floats,
//! row-major, in declared order — embedding; per block Q, K, V, O, norm1,
//! norm2, gate (gated variant only), up, down; final norm.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::model::{BlockWeights, MlpKind, ModelConfig, TransformerModel};
use crate::wire;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RPLM";
const CHECKPOINT_VERSION: u32 = 1;
const CONFIG_JSON_CAP: usize = 1 << 20;

pub fn save_checkpoint(model: &TransformerModel, path: &Path) -> Result<()> {
    if model.blocks.iter().any(|b| b.mlp_transform.is_some()) {
        return Err(Error::Format(
            "models with an explicit per-block transform are verification-only \
             and cannot be checkpointed"
                .into(),
        ));
    }
    if model.blocks.len() != model.config.n_layers {
        return Err(Error::Format(format!(
            "config declares {} layers but the model has {} blocks",
            model.config.n_layers,
            model.blocks.len()
        )));
    }
    let mut buf = Vec::new();
    wire::write_magic(&mut buf, CHECKPOINT_MAGIC)?;
    wire::write_u32(&mut buf, CHECKPOINT_VERSION)?;
    let config_json =
        serde_json::to_vec(&model.config).map_err(|e| Error::Format(e.to_string()))?;
    wire::write_prefixed_bytes(&mut buf, &config_json)?;

    wire::write_f32_slice(&mut buf, model.embedding.data())?;
    for block in &model.blocks {
        wire::write_f32_slice(&mut buf, block.attn_q.data())?;
        wire::write_f32_slice(&mut buf, block.attn_k.data())?;
        wire::write_f32_slice(&mut buf, block.attn_v.data())?;
        wire::write_f32_slice(&mut buf, block.attn_o.data())?;
        wire::write_f32_slice(&mut buf, &block.norm1)?;
        wire::write_f32_slice(&mut buf, &block.norm2)?;
        if let Some(gate) = &block.mlp_gate {
            wire::write_f32_slice(&mut buf, gate.data())?;
        }
        wire::write_f32_slice(&mut buf, block.mlp_up.data())?;
        wire::write_f32_slice(&mut buf, block.mlp_down.data())?;
    }
    wire::write_f32_slice(&mut buf, &model.final_norm)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TransformerModel> {
    let bytes = fs::read(path)?;
    let mut cur = Cursor::new(bytes);
    wire::expect_magic(&mut cur, CHECKPOINT_MAGIC, "model checkpoint")?;
    let version = wire::read_u32(&mut cur)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let config_json = wire::read_prefixed_bytes(&mut cur, CONFIG_JSON_CAP, "model checkpoint")?;
    let config: ModelConfig = serde_json::from_slice(&config_json)
        .map_err(|e| Error::Format(format!("bad checkpoint config: {e}")))?;
    config.validate()?;

    let d = config.d_model;
    fn read_mat(cur: &mut Cursor<Vec<u8>>, rows: usize, cols: usize) -> Result<Mat<f32>> {
        Ok(Mat::from_vec(
            rows,
            cols,
            wire::read_f32_vec(cur, rows * cols)?,
        ))
    }
    let embedding = read_mat(&mut cur, config.vocab_size, d)?;
    let mut blocks = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        blocks.push(BlockWeights {
            attn_q: read_mat(&mut cur, d, d)?,
            attn_k: read_mat(&mut cur, d, d)?,
            attn_v: read_mat(&mut cur, d, d)?,
            attn_o: read_mat(&mut cur, d, d)?,
            norm1: wire::read_f32_vec(&mut cur, d)?,
            norm2: wire::read_f32_vec(&mut cur, d)?,
            mlp_gate: match config.mlp_kind {
                MlpKind::GatedSilu => Some(read_mat(&mut cur, d, config.d_ff)?),
                MlpKind::Gelu => None,
            },
            mlp_up: read_mat(&mut cur, d, config.d_ff)?,
            mlp_down: read_mat(&mut cur, config.d_ff, d)?,
            mlp_transform: None,
        });
    }
    let final_norm = wire::read_f32_vec(&mut cur, d)?;

    let mut trailing = Vec::new();
    cur.read_to_end(&mut trailing)?;
    if !trailing.is_empty() {
        return Err(Error::Format(format!(
            "model checkpoint has {} trailing bytes",
            trailing.len()
        )));
    }
    Ok(TransformerModel {
        config,
        embedding,
        blocks,
        final_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{NormKind, TransformerModel};
    use crate::selection::{CutPlan, Metric};
    use tempfile::tempdir;

    fn config() -> ModelConfig {
        ModelConfig {
            n_layers: 3,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 30,
            norm_kind: NormKind::Rms,
            mlp_kind: MlpKind::GatedSilu,
            causal: true,
            seed: 77,
        }
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.rplm");
        let model = TransformerModel::init(config()).unwrap();
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(model, loaded);
    }

    #[test]
    fn gelu_variant_round_trips() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.rplm");
        let mut cfg = config();
        cfg.mlp_kind = MlpKind::Gelu;
        cfg.norm_kind = NormKind::Layernorm;
        let model = TransformerModel::init(cfg).unwrap();
        save_checkpoint(&model, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), model);
    }

    #[test]
    fn pruned_model_round_trips() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("pruned.rplm");
        let model = TransformerModel::init(config()).unwrap();
        let pruned = model
            .fuse_and_prune(&CutPlan::single(1, 1, Metric::Cosine), &[Mat::identity(8)])
            .unwrap();
        save_checkpoint(&pruned, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.n_layers(), 2);
        assert_eq!(loaded, pruned);
    }

    #[test]
    fn explicit_transform_models_are_not_checkpointable() {
        let dir = tempdir().unwrap();
        let model = TransformerModel::init(config()).unwrap();
        let reference = model
            .apply_cut_explicit(&CutPlan::single(1, 1, Metric::Cosine), &[Mat::identity(8)])
            .unwrap();
        let err = save_checkpoint(&reference, &dir.path().join("x.rplm")).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.rplm");
        let model = TransformerModel::init(config()).unwrap();
        save_checkpoint(&model, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.rplm");
        let model = TransformerModel::init(config()).unwrap();
        save_checkpoint(&model, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.extend_from_slice(&[0u8; 4]);
        std::fs::write(&path, bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }
}
