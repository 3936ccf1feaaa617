//! End-to-end orchestration: select → capture → estimate → fuse → verify.

use serde::{Deserialize, Serialize};

use crate::calib::{self, CalibrationSet};
use crate::error::{Error, Result};
use crate::eval::{self, EvalResult, MetricOrientation};
use crate::linalg::Mat;
use crate::model::{forward_logits, forward_with_capture, TransformerModel};
use crate::selection::{self, CutPlan, DistanceReport, Group, Metric};
use crate::solvers::{self, EstimationProblem, LinearTransform, SolverSpec};

/// Knobs for one pipeline run.
#[derive(Debug, Clone)]
pub struct PipelineOptions {
    /// Selection metric (also recorded in the resulting plan).
    pub metric: Metric,
    /// Run the fusion-equivalence check (fail-closed on mismatch).
    pub verify: bool,
    /// Max abs logit difference tolerated by verification.
    pub verify_tolerance: f64,
    /// Held-out set for perplexity before/after; skipped when absent.
    pub eval_set: Option<CalibrationSet>,
    /// Seed for the synthesized verification batch.
    pub seed: u64,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            metric: Metric::Cosine,
            verify: true,
            verify_tolerance: 1e-3,
            eval_set: None,
            seed: 0,
        }
    }
}

/// Residual comparison for one group: mean squared reconstruction error
/// `‖M·T − D‖²/N` under the identity baseline and the estimated T, plus
/// the solver's own objective value.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupResiduals {
    pub group: Group,
    pub identity_residual: f64,
    pub estimated_residual: f64,
    pub solver_objective: f64,
}

/// Outcome of the fusion-equivalence check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerificationReport {
    pub max_abs_logit_diff: f64,
    pub tolerance: f64,
}

/// Held-out perplexity before and after pruning. The pruned result carries
/// `relative_performance` = baseline/pruned perplexity (higher is better).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalComparison {
    pub baseline: EvalResult,
    pub pruned: EvalResult,
}

/// Machine-readable record of one pruning run. Serialized as JSON with
/// fields in declaration order, so identical runs yield identical bytes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PruneReport {
    pub plan: CutPlan,
    pub solver: SolverSpec,
    pub seed: u64,
    /// Per-candidate selection distances; absent when the plan was given
    /// explicitly instead of selected.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selection: Option<DistanceReport>,
    pub residuals: Vec<GroupResiduals>,
    pub params_before: usize,
    pub params_after: usize,
    pub compression_ratio: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verification: Option<VerificationReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalComparison>,
}

impl PruneReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Everything a pipeline run produces: the pruned model, one estimated
/// transform per (merged) group, and the report.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub pruned: TransformerModel,
    pub transforms: Vec<LinearTransform>,
    pub report: PruneReport,
}

/// Max abs logit difference between two models on a batch. The pipeline
/// uses it to compare the fused model against the explicit-transform
/// reference built from the same cut and T.
pub fn verify_equivalence(
    reference: &TransformerModel,
    fused: &TransformerModel,
    batch: &[Vec<u32>],
) -> Result<f64> {
    let a = forward_logits(reference, batch)?;
    let b = forward_logits(fused, batch)?;
    Ok(a.max_abs_diff(&b) as f64)
}

/// Selects the best single cut of span `n` under `options.metric`, then
/// estimates, fuses and verifies it.
pub fn run_pipeline(
    model: &TransformerModel,
    calib: &CalibrationSet,
    n: usize,
    spec: &SolverSpec,
    options: &PipelineOptions,
) -> Result<PipelineOutcome> {
    let report = selection::select_cut(model, calib, n, options.metric)?;
    let plan = CutPlan::single(report.best_start, n, options.metric);
    let mut outcome = run_pipeline_with_plan(model, calib, &plan, spec, options)?;
    outcome.report.selection = Some(report);
    Ok(outcome)
}

/// Runs the pipeline for an explicit plan (possibly multiple groups).
/// Back-to-back groups are merged before capture, so each returned group
/// owns exactly one transform.
pub fn run_pipeline_with_plan(
    model: &TransformerModel,
    calib: &CalibrationSet,
    plan: &CutPlan,
    spec: &SolverSpec,
    options: &PipelineOptions,
) -> Result<PipelineOutcome> {
    plan.validate(model.n_layers())?;
    let plan = plan.normalize();

    let (_, spans) = forward_with_capture(model, calib.sequences(), &plan)?;
    let problems = spans
        .iter()
        .map(|s| EstimationProblem::from_span(s, spec.needs_residual()))
        .collect::<Result<Vec<_>>>()?;
    let transforms = solvers::solve_multi(&problems, spec)?;

    let residuals = residual_table(&plan, &problems, &transforms);
    let matrices: Vec<Mat<f32>> = transforms.iter().map(|lt| lt.matrix.to_f32()).collect();
    let pruned = model.fuse_and_prune(&plan, &matrices)?;

    let verification = if options.verify {
        let reference = model.apply_cut_explicit(&plan, &matrices)?;
        let batch = verification_batch(model, options.seed)?;
        let diff = verify_equivalence(&reference, &pruned, &batch)?;
        if diff > options.verify_tolerance {
            return Err(Error::Integrity {
                max_abs_diff: diff,
                tolerance: options.verify_tolerance,
            });
        }
        Some(VerificationReport {
            max_abs_logit_diff: diff,
            tolerance: options.verify_tolerance,
        })
    } else {
        None
    };

    let eval = match &options.eval_set {
        Some(set) => {
            let baseline = eval::perplexity(model, set)?;
            let mut after = eval::perplexity(&pruned, set)?;
            after.relative_performance = Some(eval::relative_performance(
                after.perplexity,
                baseline.perplexity,
                MetricOrientation::LowerIsBetter,
            )?);
            Some(EvalComparison {
                baseline,
                pruned: after,
            })
        }
        None => None,
    };

    let params_before = model.param_count();
    let params_after = pruned.param_count();
    let report = PruneReport {
        plan,
        solver: spec.clone(),
        seed: options.seed,
        selection: None,
        residuals,
        params_before,
        params_after,
        compression_ratio: 1.0 - params_after as f64 / params_before as f64,
        verification,
        eval,
    };
    Ok(PipelineOutcome {
        pruned,
        transforms,
        report,
    })
}

fn residual_table(
    plan: &CutPlan,
    problems: &[EstimationProblem],
    transforms: &[LinearTransform],
) -> Vec<GroupResiduals> {
    plan.groups()
        .iter()
        .zip(problems.iter().zip(transforms))
        .map(|(group, (problem, lt))| {
            let eye = Mat::identity(problem.dim());
            GroupResiduals {
                group: *group,
                identity_residual: solvers::mean_sq_residual(
                    &problem.mlp_out,
                    &eye,
                    &problem.target,
                ),
                estimated_residual: solvers::mean_sq_residual(
                    &problem.mlp_out,
                    &lt.matrix,
                    &problem.target,
                ),
                solver_objective: lt.objective_value,
            }
        })
        .collect()
}

/// Held-out batch for the equivalence check: derived from the run seed,
/// but decorrelated from the calibration stream.
pub fn verification_batch(model: &TransformerModel, seed: u64) -> Result<Vec<Vec<u32>>> {
    let set = calib::synthesize(seed ^ 0x5EED_BA7C, 4, 32, model.config.vocab_size)?;
    Ok(set.sequences().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{MlpKind, ModelConfig, NormKind};
    use crate::solvers::{RegKind, SolverConfig};

    fn model(n_layers: usize, seed: u64) -> TransformerModel {
        TransformerModel::init(ModelConfig {
            n_layers,
            d_model: 16,
            n_heads: 4,
            d_ff: 32,
            vocab_size: 60,
            norm_kind: NormKind::Rms,
            mlp_kind: MlpKind::GatedSilu,
            causal: true,
            seed,
        })
        .unwrap()
    }

    fn calib_set(seed: u64) -> CalibrationSet {
        calib::synthesize(seed, 8, 32, 60).unwrap()
    }

    #[test]
    fn ls_pipeline_produces_consistent_report() {
        let m = model(6, 1);
        let calib = calib_set(2);
        let options = PipelineOptions {
            eval_set: Some(calib_set(3)),
            ..PipelineOptions::default()
        };
        let outcome = run_pipeline(&m, &calib, 2, &SolverSpec::Ls, &options).unwrap();
        let (pruned, report) = (&outcome.pruned, &outcome.report);
        assert_eq!(outcome.transforms.len(), 1);
        assert_eq!(pruned.n_layers(), 4);
        assert_eq!(report.params_before, m.param_count());
        assert_eq!(report.params_after, pruned.param_count());
        assert!(report.compression_ratio > 0.0 && report.compression_ratio < 1.0);
        // LS can never lose to the identity baseline on its own data.
        let r = &report.residuals[0];
        assert!(r.estimated_residual <= r.identity_residual);
        let verification = report.verification.as_ref().unwrap();
        assert!(verification.max_abs_logit_diff <= verification.tolerance);
        let eval = report.eval.as_ref().unwrap();
        assert!(eval.pruned.relative_performance.unwrap() > 0.0);
        let selection = report.selection.as_ref().unwrap();
        assert_eq!(selection.distances.len(), 4);
        assert_eq!(selection.best_start, report.plan.groups()[0].start);
    }

    #[test]
    fn pipeline_reports_are_byte_identical_across_runs() {
        let m = model(6, 4);
        let calib = calib_set(5);
        let options = PipelineOptions::default();
        let a = run_pipeline(&m, &calib, 2, &SolverSpec::Ls, &options).unwrap();
        let b = run_pipeline(&m, &calib, 2, &SolverSpec::Ls, &options).unwrap();
        assert_eq!(a.report.to_json().unwrap(), b.report.to_json().unwrap());
    }

    #[test]
    fn gd_pipeline_objective_beats_identity() {
        let m = model(8, 6);
        let calib = calib_set(7);
        let spec = SolverSpec::CosineGd {
            config: SolverConfig {
                lr: 1e-3,
                batch_size: 64,
                epochs: 4,
                seed: 1,
                ..SolverConfig::default()
            },
            reg: RegKind::None,
            alpha: 0.0,
            exact: false,
        };
        let report = run_pipeline(&m, &calib, 3, &spec, &PipelineOptions::default())
            .unwrap()
            .report;
        // The solver starts from the identity and keeps the best iterate,
        // so its objective is bounded by the identity's.
        let problem_identity = {
            let plan = report.plan.clone();
            let (_, spans) = forward_with_capture(&m, calib.sequences(), &plan).unwrap();
            let p = EstimationProblem::from_span(&spans[0], false).unwrap();
            solvers::cosine_objective(&Mat::identity(16), &p, false).unwrap()
        };
        assert!(report.residuals[0].solver_objective <= problem_identity);
    }

    #[test]
    fn explicit_multi_group_plan_merges_adjacent_spans() {
        let m = model(8, 8);
        let calib = calib_set(9);
        let plan = CutPlan::new(
            vec![Group::new(2, 1), Group::new(3, 1), Group::new(6, 1)],
            Metric::Cosine,
        );
        let outcome = run_pipeline_with_plan(
            &m,
            &calib,
            &plan,
            &SolverSpec::Ls,
            &PipelineOptions::default(),
        )
        .unwrap();
        let (pruned, report) = (&outcome.pruned, &outcome.report);
        // (2,1) and (3,1) are back-to-back: one merged span with one T.
        assert_eq!(report.plan.groups(), &[Group::new(2, 2), Group::new(6, 1)]);
        assert_eq!(report.residuals.len(), 2);
        assert_eq!(pruned.n_layers(), 5);
    }

    #[test]
    fn verification_failure_is_an_integrity_error() {
        let m = model(6, 10);
        let calib = calib_set(11);
        // Corrupt the comparison deliberately: fuse one transform but hand
        // the reference model a different one.
        let plan = CutPlan::single(2, 2, Metric::Cosine);
        let (_, spans) = forward_with_capture(&m, calib.sequences(), &plan).unwrap();
        let problem = EstimationProblem::from_span(&spans[0], false).unwrap();
        let lt = solvers::solve_ls(&problem).unwrap();
        let t = lt.matrix.to_f32();
        let fused = m.fuse_and_prune(&plan, std::slice::from_ref(&t)).unwrap();
        let corrupted = t.scale(1.25);
        let reference = m.apply_cut_explicit(&plan, &[corrupted]).unwrap();
        let batch = verification_batch(&m, 0).unwrap();
        let diff = verify_equivalence(&reference, &fused, &batch).unwrap();
        assert!(
            diff > 1e-3,
            "deliberate corruption went undetected (diff {diff})"
        );
    }

    #[test]
    fn identity_transform_verifies_exactly() {
        let m = model(5, 12);
        let plan = CutPlan::single(2, 1, Metric::Cosine);
        let eye = Mat::identity(16);
        let fused = m.fuse_and_prune(&plan, std::slice::from_ref(&eye)).unwrap();
        let reference = m.apply_cut_explicit(&plan, &[eye]).unwrap();
        let batch = verification_batch(&m, 1).unwrap();
        let diff = verify_equivalence(&reference, &fused, &batch).unwrap();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn ls_residual_is_monotone_under_calibration_extension() {
        // Nested calibration sets: fitting on the superset can only lower
        // the superset residual.
        let m = model(6, 13);
        let all = calib::synthesize(14, 8, 32, 60).unwrap();
        let plan = CutPlan::single(3, 2, Metric::Cosine);

        let problem_for = |n_seqs: usize| {
            let subset: Vec<Vec<u32>> = all.sequences()[..n_seqs].to_vec();
            let (_, spans) = forward_with_capture(&m, &subset, &plan).unwrap();
            EstimationProblem::from_span(&spans[0], false).unwrap()
        };
        let superset = problem_for(8);
        let mut prev_residual = f64::INFINITY;
        for n_seqs in [2, 4, 8] {
            let fitted = solvers::solve_ls(&problem_for(n_seqs)).unwrap();
            let residual =
                solvers::mean_sq_residual(&superset.mlp_out, &fitted.matrix, &superset.target);
            assert!(
                residual <= prev_residual + 1e-12,
                "superset residual grew to {residual} with {n_seqs} sequences"
            );
            prev_residual = residual;
        }
    }
}
