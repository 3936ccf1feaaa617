//! Quality metrics: next-token perplexity and performance ratios.

use serde::{Deserialize, Serialize};

use crate::calib::CalibrationSet;
use crate::error::{Error, Result};
use crate::model::{forward_logits, TransformerModel};
use crate::parallel;

/// Perplexity over a token set, with an optional ratio against a baseline
/// run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub perplexity: f64,
    pub mean_nll: f64,
    pub token_count: usize,
    /// Ratio against a baseline model, oriented so higher is better;
    /// absent when no baseline was evaluated.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub relative_performance: Option<f64>,
}

/// Mean next-token negative log-likelihood and its exponential.
///
/// Each sequence of length S contributes S−1 predictions; the mean pools
/// predictions across sequences. Log-probabilities are computed in 64-bit
/// with max-shifted log-sum-exp.
pub fn perplexity(model: &TransformerModel, set: &CalibrationSet) -> Result<EvalResult> {
    let sequences = set.sequences();
    if sequences.is_empty() {
        return Err(Error::Input("no sequences to evaluate".into()));
    }
    if let Some(short) = sequences.iter().find(|s| s.len() < 2) {
        return Err(Error::Input(format!(
            "perplexity needs at least 2 tokens per sequence, got {}",
            short.len()
        )));
    }
    let per_seq: Vec<Result<(f64, usize)>> = parallel::map_slice(sequences, |seq| {
        let logits = forward_logits(model, std::slice::from_ref(seq))?;
        let mut nll_sum = 0.0f64;
        for t in 0..seq.len() - 1 {
            let row = logits.row(t);
            let target = seq[t + 1] as usize;
            let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
            let lse = max
                + row
                    .iter()
                    .map(|&v| (v as f64 - max).exp())
                    .sum::<f64>()
                    .ln();
            nll_sum += lse - row[target] as f64;
        }
        Ok((nll_sum, seq.len() - 1))
    });
    let mut nll_sum = 0.0f64;
    let mut count = 0usize;
    for r in per_seq {
        let (s, c) = r?;
        nll_sum += s;
        count += c;
    }
    let mean_nll = nll_sum / count as f64;
    Ok(EvalResult {
        perplexity: mean_nll.exp(),
        mean_nll,
        token_count: count,
        relative_performance: None,
    })
}

/// Whether larger values of a metric are better (accuracy-like) or worse
/// (perplexity-like).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricOrientation {
    HigherIsBetter,
    LowerIsBetter,
}

/// Ratio of pruned-model quality to baseline quality, oriented so that
/// 1.0 means parity and higher means the pruned model holds up better:
/// `pruned / baseline` for accuracy-like metrics, `baseline / pruned` for
/// perplexity-like ones.
pub fn relative_performance(
    pruned: f64,
    baseline: f64,
    orientation: MetricOrientation,
) -> Result<f64> {
    if baseline <= 0.0 || !baseline.is_finite() {
        return Err(Error::Input(format!(
            "baseline metric must be positive and finite, got {baseline}"
        )));
    }
    match orientation {
        MetricOrientation::HigherIsBetter => Ok(pruned / baseline),
        MetricOrientation::LowerIsBetter => {
            if pruned <= 0.0 || !pruned.is_finite() {
                return Err(Error::Input(format!(
                    "pruned metric must be positive and finite, got {pruned}"
                )));
            }
            Ok(baseline / pruned)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calib;
    use crate::linalg::Mat;
    use crate::model::{MlpKind, ModelConfig, NormKind};

    fn model(seed: u64) -> TransformerModel {
        TransformerModel::init(ModelConfig {
            n_layers: 3,
            d_model: 16,
            n_heads: 4,
            d_ff: 32,
            vocab_size: 40,
            norm_kind: NormKind::Rms,
            mlp_kind: MlpKind::GatedSilu,
            causal: true,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn uniform_logits_give_vocab_sized_perplexity() {
        // A zero embedding zeroes every logit (the head is tied), which is
        // the uniform distribution over the vocabulary.
        let mut m = model(1);
        m.embedding = Mat::zeros(40, 16);
        let set = calib::synthesize(2, 4, 32, 40).unwrap();
        let result = perplexity(&m, &set).unwrap();
        assert!((result.perplexity - 40.0).abs() / 40.0 < 1e-3);
        assert_eq!(result.token_count, 4 * 31);
    }

    #[test]
    fn perplexity_is_exp_of_mean_nll() {
        let set = calib::synthesize(3, 2, 16, 40).unwrap();
        let result = perplexity(&model(2), &set).unwrap();
        assert!((result.perplexity - result.mean_nll.exp()).abs() < 1e-15);
        assert!(result.perplexity > 0.0);
    }

    #[test]
    fn perplexity_is_batch_order_invariant() {
        let set = calib::synthesize(4, 6, 16, 40).unwrap();
        let m = model(3);
        let forward = perplexity(&m, &set).unwrap();
        let mut reversed_seqs = set.sequences().to_vec();
        reversed_seqs.reverse();
        // Rebuild through the loader path to keep the type immutable.
        let ids: Vec<u32> = reversed_seqs.into_iter().flatten().collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toks.bin");
        calib::write_binary_tokens(&path, &ids).unwrap();
        let reversed = calib::load_tokens(&path, 16, 40).unwrap();
        let backward = perplexity(&m, &reversed).unwrap();
        assert!((forward.mean_nll - backward.mean_nll).abs() < 1e-12);
    }

    #[test]
    fn single_token_sequences_are_rejected() {
        let ids: Vec<u32> = vec![1, 2, 3];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toks.txt");
        calib::write_text_tokens(&path, &ids).unwrap();
        let set = calib::load_tokens(&path, 1, 40).unwrap();
        assert!(matches!(perplexity(&model(4), &set), Err(Error::Input(_))));
    }

    #[test]
    fn relative_performance_orientations() {
        // Accuracy-like: straight ratio; the classic 0.419 / 0.453 case.
        let rp = relative_performance(0.419, 0.453, MetricOrientation::HigherIsBetter).unwrap();
        assert!((rp - 0.925).abs() < 5e-4);
        // Perplexity-like: inverted so higher stays better.
        let rp = relative_performance(12.0, 10.0, MetricOrientation::LowerIsBetter).unwrap();
        assert!((rp - 10.0 / 12.0).abs() < 1e-15);
        // Parity.
        let rp = relative_performance(7.0, 7.0, MetricOrientation::LowerIsBetter).unwrap();
        assert!((rp - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_baseline_is_an_input_error() {
        assert!(relative_performance(1.0, 0.0, MetricOrientation::HigherIsBetter).is_err());
        assert!(relative_performance(0.0, 1.0, MetricOrientation::LowerIsBetter).is_err());
    }
}
