//! Decoder-only reference transformer.
//!
//! A deliberately small, dependency-free pre-norm stack: per block a
//! multi-head attention sub-layer and an MLP sub-layer, each behind a
//! residual add. The block structure is the object of study — spans of
//! blocks get replaced by a single linear map folded into the preceding
//! block's down-projection — so the forward pass favors clarity and
//! determinism over speed.

mod checkpoint;
mod forward;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use forward::{
    collect_block_outputs, forward_logits, forward_with_capture, BlockActivations, SpanActivations,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::selection::CutPlan;

/// Normalization applied before each sub-layer. Both variants are
/// scale-only (one learned gain per channel, no bias).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Rms,
    Layernorm,
}

/// MLP variant: gated SiLU (gate/up/down) or plain GELU (up/down).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MlpKind {
    GatedSilu,
    Gelu,
}

/// Architecture hyperparameters plus the init seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub norm_kind: NormKind,
    pub mlp_kind: MlpKind,
    pub causal: bool,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0
            || self.d_model == 0
            || self.n_heads == 0
            || self.d_ff == 0
            || self.vocab_size == 0
        {
            return Err(Error::Config(
                "all model dimensions must be at least 1".into(),
            ));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Weights of one transformer block.
///
/// `mlp_transform` is normally `None`. The pipeline's verification step
/// builds a reference model in which the estimated d×d map is kept as an
/// explicit factor applied to the MLP output instead of being folded into
/// `mlp_down`; only that reference path sets it.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub attn_q: Mat<f32>,
    pub attn_k: Mat<f32>,
    pub attn_v: Mat<f32>,
    pub attn_o: Mat<f32>,
    pub norm1: Vec<f32>,
    pub norm2: Vec<f32>,
    /// Present only for the gated MLP variant.
    pub mlp_gate: Option<Mat<f32>>,
    pub mlp_up: Mat<f32>,
    pub mlp_down: Mat<f32>,
    pub mlp_transform: Option<Mat<f32>>,
}

/// Decoder-only transformer with an embedding-tied output head.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerModel {
    pub config: ModelConfig,
    /// `[vocab_size x d_model]`; also used (transposed) as the output head.
    pub embedding: Mat<f32>,
    pub blocks: Vec<BlockWeights>,
    pub final_norm: Vec<f32>,
}

impl TransformerModel {
    /// Builds a model with seeded Gaussian(0, 0.02) weights and unit norm
    /// gains. Two calls with equal configs produce bitwise-identical
    /// weights: all draws come from one generator in a fixed order
    /// (embedding, then per block Q, K, V, O, gate, up, down, then nothing —
    /// norm gains are constants).
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0f32, 0.02).expect("valid scale");
        let mut draw =
            |rows: usize, cols: usize| Mat::from_fn(rows, cols, |_, _| normal.sample(&mut rng));
        let d = config.d_model;
        let embedding = draw(config.vocab_size, d);
        let mut blocks = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            blocks.push(BlockWeights {
                attn_q: draw(d, d),
                attn_k: draw(d, d),
                attn_v: draw(d, d),
                attn_o: draw(d, d),
                norm1: vec![1.0; d],
                norm2: vec![1.0; d],
                mlp_gate: match config.mlp_kind {
                    MlpKind::GatedSilu => Some(draw(d, config.d_ff)),
                    MlpKind::Gelu => None,
                },
                mlp_up: draw(d, config.d_ff),
                mlp_down: draw(config.d_ff, d),
                mlp_transform: None,
            });
        }
        Ok(TransformerModel {
            config,
            embedding,
            blocks,
            final_norm: vec![1.0; d],
        })
    }

    pub fn n_layers(&self) -> usize {
        self.blocks.len()
    }

    /// Total parameter count. The output head is tied to the embedding and
    /// contributes nothing; an explicit per-block transform (reference
    /// models only) does count, since it is a real extra matrix.
    pub fn param_count(&self) -> usize {
        let mat = |m: &Mat<f32>| m.rows() * m.cols();
        let mut total = mat(&self.embedding) + self.final_norm.len();
        for b in &self.blocks {
            total += mat(&b.attn_q) + mat(&b.attn_k) + mat(&b.attn_v) + mat(&b.attn_o);
            total += b.norm1.len() + b.norm2.len();
            total += b.mlp_gate.as_ref().map_or(0, &mat);
            total += mat(&b.mlp_up) + mat(&b.mlp_down);
            total += b.mlp_transform.as_ref().map_or(0, &mat);
        }
        total
    }

    fn check_transforms(&self, plan: &CutPlan, transforms: &[Mat<f32>]) -> Result<()> {
        plan.validate(self.n_layers())?;
        if plan.groups().len() != transforms.len() {
            return Err(Error::Plan(format!(
                "{} groups but {} transforms",
                plan.groups().len(),
                transforms.len()
            )));
        }
        let d = self.config.d_model;
        for t in transforms {
            if t.rows() != d || t.cols() != d {
                return Err(Error::Plan(format!(
                    "transform is {}x{}, model hidden size is {d}",
                    t.rows(),
                    t.cols()
                )));
            }
        }
        Ok(())
    }

    /// For each group `(i, n)` in the plan: folds the group's transform into
    /// block `i`'s down-projection (`W_down · T`, shape unchanged) and
    /// removes blocks `i+1 ..= i+n`. The result has `Σn` fewer blocks and no
    /// new parameters.
    pub fn fuse_and_prune(&self, plan: &CutPlan, transforms: &[Mat<f32>]) -> Result<Self> {
        self.check_transforms(plan, transforms)?;
        let mut out = self.clone();
        // Walk groups back to front so removals do not shift pending indices.
        for (group, t) in plan.groups().iter().zip(transforms).rev() {
            let host = &mut out.blocks[group.start - 1];
            host.mlp_down = host.mlp_down.matmul(t);
            out.blocks.drain(group.start..group.start + group.span);
        }
        out.config.n_layers = out.blocks.len();
        Ok(out)
    }

    /// Reference counterpart of [`fuse_and_prune`]: removes the same blocks
    /// but keeps each transform as an explicit factor on the host block's
    /// MLP output instead of folding it into the weights. Used to verify
    /// that fusion is exact up to float rounding.
    pub fn apply_cut_explicit(&self, plan: &CutPlan, transforms: &[Mat<f32>]) -> Result<Self> {
        self.check_transforms(plan, transforms)?;
        let mut out = self.clone();
        for (group, t) in plan.groups().iter().zip(transforms).rev() {
            out.blocks[group.start - 1].mlp_transform = Some(t.clone());
            out.blocks.drain(group.start..group.start + group.span);
        }
        out.config.n_layers = out.blocks.len();
        Ok(out)
    }
}
