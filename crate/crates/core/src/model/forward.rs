//! Forward pass with optional activation capture.
//!
//! Each block follows the pre-norm layout: the attention sub-layer output
//! is added back onto the input (`Y = X + Attn(norm1(X))`), the MLP reads
//! the result (`M = Mlp(norm2(Y))`), and the block output is the second
//! residual sum (`L = Y + M`). Every quantity the estimation stage needs —
//! `Y` and `M` where a span begins, `L` where it ends — is copied out of
//! the same pass that produces the logits, so capture can never perturb
//! them.
//!
//! Positions enter through rotary embeddings on Q and K. Causal masking is
//! implemented by restricting each query's key loop to its prefix, which
//! keeps later positions out of the arithmetic entirely (not just
//! down-weighted), so causality holds bitwise.

use crate::error::{Error, Result};
use crate::linalg::{vstack, Mat};
use crate::model::{BlockWeights, MlpKind, NormKind, TransformerModel};
use crate::parallel;
use crate::selection::{CutPlan, Group};

const NORM_EPS: f32 = 1e-5;

/// Per-block activations over a token batch, rows pooled across sequences.
#[derive(Debug, Clone)]
pub struct BlockActivations {
    /// Post-attention residual `Y` `[N x d]`.
    pub y: Mat<f32>,
    /// MLP output `M` `[N x d]`.
    pub m: Mat<f32>,
    /// Block output `L = Y + M` `[N x d]`.
    pub l: Mat<f32>,
}

/// Activations framing one group `(i, n)`: the host block's `Y_i`, `M_i`,
/// `L_i` and the span output `L_{i+n}`.
#[derive(Debug, Clone)]
pub struct SpanActivations {
    pub group: Group,
    pub y_start: Mat<f32>,
    pub m_start: Mat<f32>,
    pub l_start: Mat<f32>,
    pub l_end: Mat<f32>,
}

impl SpanActivations {
    pub fn n_tokens(&self) -> usize {
        self.y_start.rows()
    }
}

struct SeqRun {
    logits: Mat<f32>,
    /// One entry per requested block index, in requested order.
    captured: Vec<BlockActivations>,
}

fn norm_rows(x: &Mat<f32>, gain: &[f32], kind: NormKind) -> Mat<f32> {
    let mut out = Mat::zeros(x.rows(), x.cols());
    let dim = x.cols() as f32;
    for r in 0..x.rows() {
        let row = x.row(r);
        let out_row = out.row_mut(r);
        match kind {
            NormKind::Rms => {
                let mean_sq = row.iter().map(|&v| v * v).sum::<f32>() / dim;
                let inv = 1.0 / (mean_sq + NORM_EPS).sqrt();
                for (o, (&v, &g)) in out_row.iter_mut().zip(row.iter().zip(gain)) {
                    *o = v * inv * g;
                }
            }
            NormKind::Layernorm => {
                let mean = row.iter().sum::<f32>() / dim;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / dim;
                let inv = 1.0 / (var + NORM_EPS).sqrt();
                for (o, (&v, &g)) in out_row.iter_mut().zip(row.iter().zip(gain)) {
                    *o = (v - mean) * inv * g;
                }
            }
        }
    }
    out
}

/// Rotates consecutive (even, odd) coordinate pairs within each head by a
/// position-dependent angle, base frequency 10000.
fn apply_rotary(x: &mut Mat<f32>, n_heads: usize) {
    let d = x.cols();
    let dh = d / n_heads;
    let half = dh / 2;
    if half == 0 {
        return;
    }
    let inv_freq: Vec<f32> = (0..half)
        .map(|j| 10000f32.powf(-((2 * j) as f32) / dh as f32))
        .collect();
    for t in 0..x.rows() {
        let row = x.row_mut(t);
        for h in 0..n_heads {
            let lo = h * dh;
            for (j, &freq) in inv_freq.iter().enumerate() {
                let (sin, cos) = (t as f32 * freq).sin_cos();
                let a = row[lo + 2 * j];
                let b = row[lo + 2 * j + 1];
                row[lo + 2 * j] = a * cos - b * sin;
                row[lo + 2 * j + 1] = a * sin + b * cos;
            }
        }
    }
}

fn attention(q: &Mat<f32>, k: &Mat<f32>, v: &Mat<f32>, n_heads: usize, causal: bool) -> Mat<f32> {
    let s = q.rows();
    let d = q.cols();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut ctx = Mat::zeros(s, d);
    let mut weights = vec![0.0f32; s];
    for h in 0..n_heads {
        let lo = h * dh;
        for t in 0..s {
            let visible = if causal { t + 1 } else { s };
            let q_row = &q.row(t)[lo..lo + dh];
            let mut max = f32::NEG_INFINITY;
            for (kk, w) in weights.iter_mut().enumerate().take(visible) {
                let k_row = &k.row(kk)[lo..lo + dh];
                let dot: f32 = q_row.iter().zip(k_row).map(|(&a, &b)| a * b).sum();
                *w = dot * scale;
                max = max.max(*w);
            }
            let mut denom = 0.0f32;
            for w in weights.iter_mut().take(visible) {
                *w = (*w - max).exp();
                denom += *w;
            }
            let out_row = &mut ctx.row_mut(t)[lo..lo + dh];
            for (kk, &w) in weights.iter().enumerate().take(visible) {
                let p = w / denom;
                let v_row = &v.row(kk)[lo..lo + dh];
                for (o, &vv) in out_row.iter_mut().zip(v_row) {
                    *o += p * vv;
                }
            }
        }
    }
    ctx
}

#[inline]
fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

/// Tanh-approximation GELU (the common transformer variant).
#[inline]
fn gelu(x: f32) -> f32 {
    const SQRT_2_OVER_PI: f32 = 0.797_884_6;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())
}

fn mlp(h: &Mat<f32>, block: &BlockWeights, kind: MlpKind) -> Mat<f32> {
    match kind {
        MlpKind::GatedSilu => {
            let gate = h.matmul(block.mlp_gate.as_ref().expect("gated mlp carries a gate"));
            let mut act = h.matmul(&block.mlp_up);
            for (a, &g) in act.data_mut().iter_mut().zip(gate.data()) {
                *a *= silu(g);
            }
            act.matmul(&block.mlp_down)
        }
        MlpKind::Gelu => {
            let mut act = h.matmul(&block.mlp_up);
            for v in act.data_mut() {
                *v = gelu(*v);
            }
            act.matmul(&block.mlp_down)
        }
    }
}

/// Runs one sequence, keeping (Y, M, L) for each block index in
/// `requested` (sorted, 1-based).
fn run_sequence(model: &TransformerModel, tokens: &[u32], requested: &[usize]) -> Result<SeqRun> {
    let cfg = &model.config;
    if tokens.is_empty() {
        return Err(Error::Input("empty token sequence".into()));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Input(format!(
            "token id {bad} out of range for vocab size {}",
            cfg.vocab_size
        )));
    }
    let s = tokens.len();
    let d = cfg.d_model;
    let mut x = Mat::from_fn(s, d, |r, c| model.embedding.get(tokens[r] as usize, c));
    let mut captured = Vec::with_capacity(requested.len());

    for (bi, block) in model.blocks.iter().enumerate() {
        let h1 = norm_rows(&x, &block.norm1, cfg.norm_kind);
        let mut q = h1.matmul(&block.attn_q);
        let mut k = h1.matmul(&block.attn_k);
        let v = h1.matmul(&block.attn_v);
        apply_rotary(&mut q, cfg.n_heads);
        apply_rotary(&mut k, cfg.n_heads);
        let ctx = attention(&q, &k, &v, cfg.n_heads, cfg.causal);
        let attn_out = ctx.matmul(&block.attn_o);
        let y = x.add(&attn_out);

        let h2 = norm_rows(&y, &block.norm2, cfg.norm_kind);
        let mut m = mlp(&h2, block, cfg.mlp_kind);
        if let Some(t) = &block.mlp_transform {
            m = m.matmul(t);
        }
        let l = y.add(&m);

        if requested.binary_search(&(bi + 1)).is_ok() {
            captured.push(BlockActivations {
                y: y.clone(),
                m: m.clone(),
                l: l.clone(),
            });
        }
        x = l;
    }

    let h_final = norm_rows(&x, &model.final_norm, cfg.norm_kind);
    // Tied output head: logits = h · embeddingᵀ.
    let vocab = cfg.vocab_size;
    let mut logits = Mat::zeros(s, vocab);
    for t in 0..s {
        let h_row = h_final.row(t);
        let out = logits.row_mut(t);
        for (vid, o) in out.iter_mut().enumerate() {
            let e_row = model.embedding.row(vid);
            *o = h_row.iter().zip(e_row).map(|(&a, &b)| a * b).sum();
        }
    }
    Ok(SeqRun { logits, captured })
}

/// Runs every sequence (concurrently when the `parallel` feature is on;
/// results are stitched in sequence order either way) and pools rows.
fn run_batch(
    model: &TransformerModel,
    sequences: &[Vec<u32>],
    requested: &[usize],
) -> Result<(Mat<f32>, Vec<BlockActivations>)> {
    if sequences.is_empty() {
        return Err(Error::Input("no sequences to run".into()));
    }
    let runs: Vec<Result<SeqRun>> =
        parallel::map_slice(sequences, |seq| run_sequence(model, seq, requested));
    let runs = runs.into_iter().collect::<Result<Vec<SeqRun>>>()?;
    let logits = vstack(&runs.iter().map(|r| &r.logits).collect::<Vec<_>>());
    let captured = (0..requested.len())
        .map(|idx| BlockActivations {
            y: vstack(&runs.iter().map(|r| &r.captured[idx].y).collect::<Vec<_>>()),
            m: vstack(&runs.iter().map(|r| &r.captured[idx].m).collect::<Vec<_>>()),
            l: vstack(&runs.iter().map(|r| &r.captured[idx].l).collect::<Vec<_>>()),
        })
        .collect();
    Ok((logits, captured))
}

/// Logits for a batch of sequences, pooled to `[N x vocab_size]` in
/// sequence order.
pub fn forward_logits(model: &TransformerModel, sequences: &[Vec<u32>]) -> Result<Mat<f32>> {
    run_batch(model, sequences, &[]).map(|(logits, _)| logits)
}

/// Forward pass that additionally captures, for each group in the plan,
/// the activations needed to estimate its transform. The logits are
/// bitwise identical to [`forward_logits`]; capture only copies values
/// out of the shared pass.
pub fn forward_with_capture(
    model: &TransformerModel,
    sequences: &[Vec<u32>],
    plan: &CutPlan,
) -> Result<(Mat<f32>, Vec<SpanActivations>)> {
    plan.validate(model.n_layers())?;
    let mut requested: Vec<usize> = plan
        .groups()
        .iter()
        .flat_map(|g| [g.start, g.end()])
        .collect();
    requested.sort_unstable();
    requested.dedup();
    let (logits, captured) = run_batch(model, sequences, &requested)?;
    let spans = plan
        .groups()
        .iter()
        .map(|g| {
            let si = requested.binary_search(&g.start).expect("requested start");
            let ei = requested.binary_search(&g.end()).expect("requested end");
            SpanActivations {
                group: *g,
                y_start: captured[si].y.clone(),
                m_start: captured[si].m.clone(),
                l_start: captured[si].l.clone(),
                l_end: captured[ei].l.clone(),
            }
        })
        .collect();
    Ok((logits, spans))
}

/// Block outputs `L_1 ..= L_n`, each pooled to `[N x d]`.
pub fn collect_block_outputs(
    model: &TransformerModel,
    sequences: &[Vec<u32>],
) -> Result<Vec<Mat<f32>>> {
    let requested: Vec<usize> = (1..=model.n_layers()).collect();
    let (_, captured) = run_batch(model, sequences, &requested)?;
    Ok(captured.into_iter().map(|b| b.l).collect())
}
