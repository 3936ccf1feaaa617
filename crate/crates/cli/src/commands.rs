//! One function per subcommand. Each resolves the configuration, loads or
//! builds the model and calibration set, runs the matching library
//! operation, and writes artifacts (JSON reports, CSV tables, transform
//! files, checkpoints) into the output directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use spanfuse::calib::{self, CalibrationSet};
use spanfuse::eval::{self, EvalResult, MetricOrientation};
use spanfuse::model::{load_checkpoint, save_checkpoint, TransformerModel};
use spanfuse::pipeline::{self, PipelineOptions, PipelineOutcome, PruneReport, VerificationReport};
use spanfuse::selection::{self, CutPlan, DistanceReport, SweepRow};
use spanfuse::solvers::{self, EstimationProblem, LinearTransform};
use spanfuse::{Error, Result};

use crate::config::{EffectiveConfig, ModelSource, Settings};
use crate::{CommonArgs, EvalArgs, SweepArgs, VerifyArgs};

fn load_model(settings: &Settings) -> Result<TransformerModel> {
    match &settings.model {
        ModelSource::Path(path) => {
            let model = load_checkpoint(path)?;
            log::info!(
                "loaded checkpoint {} ({} layers, d={})",
                path.display(),
                model.n_layers(),
                model.config.d_model
            );
            Ok(model)
        }
        ModelSource::Inline(spec) => {
            let config = spec.to_config(settings.seed);
            log::info!(
                "built in-memory model ({} layers, d={}, seed {})",
                config.n_layers,
                config.d_model,
                config.seed
            );
            TransformerModel::init(config)
        }
    }
}

fn load_calibration(settings: &Settings, model: &TransformerModel) -> Result<CalibrationSet> {
    let vocab = model.config.vocab_size;
    let set = match &settings.calib {
        Some(path) => calib::load_tokens(path, settings.seq_len, vocab)?,
        None => calib::synthesize(settings.seed, settings.synthetic, settings.seq_len, vocab)?,
    };
    let d = model.config.d_model;
    if set.n_tokens() < d * d {
        log::warn!(
            "calibration has {} tokens but the transform has {} entries; \
             expect a loosely determined fit (want at least d^2 = {} tokens)",
            set.n_tokens(),
            d * d,
            d * d
        );
    }
    if settings.mask > 0.0 {
        return calib::apply_masking(
            &set,
            settings.mask,
            settings.mask_token,
            settings.mask_seed(),
        );
    }
    Ok(set)
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    fs::write(&path, text)?;
    Ok(path)
}

fn transform_file_name(plan: &CutPlan, index: usize) -> String {
    let group = plan.groups()[index];
    format!("transform_{}_{}.rplt", group.start, group.span)
}

fn save_transforms(
    dir: &Path,
    plan: &CutPlan,
    transforms: &[LinearTransform],
) -> Result<Vec<String>> {
    fs::create_dir_all(dir)?;
    let mut names = Vec::with_capacity(transforms.len());
    for (index, lt) in transforms.iter().enumerate() {
        let name = transform_file_name(plan, index);
        solvers::save_transform(lt, &dir.join(&name))?;
        names.push(name);
    }
    Ok(names)
}

/// The plan to operate on: `--groups` verbatim when present, otherwise the
/// best single cut of span `n` under the configured metric.
fn plan_or_select(
    settings: &Settings,
    model: &TransformerModel,
    calib: &CalibrationSet,
) -> Result<(CutPlan, Option<DistanceReport>)> {
    match settings.explicit_plan() {
        Some(plan) => {
            plan.validate(model.n_layers())?;
            Ok((plan, None))
        }
        None => {
            let report = selection::select_cut(model, calib, settings.n, settings.metric)?;
            let plan = CutPlan::single(report.best_start, settings.n, settings.metric);
            Ok((plan, Some(report)))
        }
    }
}

// ---------------------------------------------------------------------------
// select
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct SelectArtifact {
    config: EffectiveConfig,
    report: DistanceReport,
}

pub fn select(args: &CommonArgs) -> Result<()> {
    let settings = Settings::resolve(args)?;
    let model = load_model(&settings)?;
    let calib = load_calibration(&settings, &model)?;
    let report = selection::select_cut(&model, &calib, settings.n, settings.metric)?;
    let best = report.best_start;
    let distance = report.distances[best - 1];
    let artifact = SelectArtifact {
        config: settings.echo("select"),
        report,
    };
    let path = write_json(&settings.out, "select.json", &artifact)?;
    println!(
        "best cut: start {best}, span {} ({} distance {distance:.6}); report: {}",
        settings.n,
        settings.metric,
        path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// estimate
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct EstimatedGroup {
    start: usize,
    span: usize,
    objective: f64,
    file: String,
}

#[derive(Serialize)]
struct EstimateArtifact {
    config: EffectiveConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    selection: Option<DistanceReport>,
    groups: Vec<EstimatedGroup>,
}

pub fn estimate(args: &CommonArgs) -> Result<()> {
    let settings = Settings::resolve(args)?;
    let spec = settings.solver_spec()?;
    let model = load_model(&settings)?;
    let calib = load_calibration(&settings, &model)?;
    let (plan, selection) = plan_or_select(&settings, &model, &calib)?;
    let plan = plan.normalize();
    plan.validate(model.n_layers())?;

    let (_, spans) = spanfuse::model::forward_with_capture(&model, calib.sequences(), &plan)?;
    let problems = spans
        .iter()
        .map(|s| EstimationProblem::from_span(s, spec.needs_residual()))
        .collect::<Result<Vec<_>>>()?;
    let transforms = solvers::solve_multi(&problems, &spec)?;
    let files = save_transforms(&settings.out, &plan, &transforms)?;

    let groups: Vec<EstimatedGroup> = plan
        .groups()
        .iter()
        .zip(transforms.iter().zip(&files))
        .map(|(group, (lt, file))| EstimatedGroup {
            start: group.start,
            span: group.span,
            objective: lt.objective_value,
            file: file.clone(),
        })
        .collect();
    for g in &groups {
        println!(
            "group {}:{} -> {} (objective {:.6e})",
            g.start, g.span, g.file, g.objective
        );
    }
    let artifact = EstimateArtifact {
        config: settings.echo("estimate"),
        selection,
        groups,
    };
    let path = write_json(&settings.out, "estimate.json", &artifact)?;
    println!("report: {}", path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// prune
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct PruneArtifact {
    config: EffectiveConfig,
    checkpoint: String,
    transform_files: Vec<String>,
    report: PruneReport,
}

pub fn prune(args: &CommonArgs) -> Result<()> {
    let settings = Settings::resolve(args)?;
    let spec = settings.solver_spec()?;
    let model = load_model(&settings)?;
    let calib = load_calibration(&settings, &model)?;
    let options = PipelineOptions {
        metric: settings.metric,
        verify: settings.verify,
        verify_tolerance: settings.verify_tolerance,
        eval_set: Some(calib.clone()),
        seed: settings.seed,
    };
    let PipelineOutcome {
        pruned,
        transforms,
        report,
    } = match settings.explicit_plan() {
        Some(plan) => pipeline::run_pipeline_with_plan(&model, &calib, &plan, &spec, &options)?,
        None => pipeline::run_pipeline(&model, &calib, settings.n, &spec, &options)?,
    };

    let transform_files = save_transforms(&settings.out, &report.plan, &transforms)?;
    let checkpoint = "pruned.rplm".to_string();
    save_checkpoint(&pruned, &settings.out.join(&checkpoint))?;

    println!(
        "removed {} of {} blocks; params {} -> {} (compression {:.1}%)",
        report.plan.total_span(),
        model.n_layers(),
        report.params_before,
        report.params_after,
        100.0 * report.compression_ratio
    );
    if let Some(v) = &report.verification {
        println!(
            "verification: max logit diff {:.3e} (tolerance {:.1e})",
            v.max_abs_logit_diff, v.tolerance
        );
    }
    if let Some(e) = &report.eval {
        println!(
            "perplexity: baseline {:.4}, pruned {:.4} (relative performance {:.4})",
            e.baseline.perplexity,
            e.pruned.perplexity,
            e.pruned.relative_performance.unwrap_or(f64::NAN)
        );
    }
    let artifact = PruneArtifact {
        config: settings.echo("prune"),
        checkpoint,
        transform_files,
        report,
    };
    let path = write_json(&settings.out, "report.json", &artifact)?;
    println!("report: {}", path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct VerifyArtifact {
    config: EffectiveConfig,
    transforms: Vec<String>,
    result: VerificationReport,
    passed: bool,
}

pub fn verify(args: &VerifyArgs) -> Result<()> {
    let settings = Settings::resolve(&args.common)?;
    let plan = settings.explicit_plan().ok_or_else(|| {
        Error::Input("verify needs --groups to know which blocks each transform replaces".into())
    })?;
    let model = load_model(&settings)?;
    plan.validate(model.n_layers())?;
    if args.transforms.len() != plan.groups().len() {
        return Err(Error::Input(format!(
            "{} transform file(s) for {} group(s); give one --transform per group",
            args.transforms.len(),
            plan.groups().len()
        )));
    }
    let matrices = args
        .transforms
        .iter()
        .map(|path| Ok(solvers::load_transform(path)?.matrix.to_f32()))
        .collect::<Result<Vec<_>>>()?;

    let fused = model.fuse_and_prune(&plan, &matrices)?;
    let reference = model.apply_cut_explicit(&plan, &matrices)?;
    let batch = pipeline::verification_batch(&model, settings.seed)?;
    let diff = pipeline::verify_equivalence(&reference, &fused, &batch)?;
    let passed = diff <= settings.verify_tolerance;

    let artifact = VerifyArtifact {
        config: settings.echo("verify"),
        transforms: args
            .transforms
            .iter()
            .map(|p| p.display().to_string())
            .collect(),
        result: VerificationReport {
            max_abs_logit_diff: diff,
            tolerance: settings.verify_tolerance,
        },
        passed,
    };
    let path = write_json(&settings.out, "verify.json", &artifact)?;
    println!(
        "max logit diff {:.3e} (tolerance {:.1e}); report: {}",
        diff,
        settings.verify_tolerance,
        path.display()
    );
    if !passed {
        return Err(Error::Integrity {
            max_abs_diff: diff,
            tolerance: settings.verify_tolerance,
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct EvalArtifact {
    config: EffectiveConfig,
    result: EvalResult,
    #[serde(skip_serializing_if = "Option::is_none")]
    baseline: Option<EvalResult>,
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let settings = Settings::resolve(&args.common)?;
    let model = load_model(&settings)?;
    let set = load_calibration(&settings, &model)?;
    let mut result = eval::perplexity(&model, &set)?;
    let baseline = match &args.baseline {
        Some(path) => {
            let base_model = load_checkpoint(path)?;
            let base = eval::perplexity(&base_model, &set)?;
            result.relative_performance = Some(eval::relative_performance(
                result.perplexity,
                base.perplexity,
                MetricOrientation::LowerIsBetter,
            )?);
            Some(base)
        }
        None => None,
    };
    println!(
        "perplexity {:.6} (mean nll {:.6}) over {} predictions",
        result.perplexity, result.mean_nll, result.token_count
    );
    if let (Some(base), Some(rp)) = (&baseline, result.relative_performance) {
        println!(
            "baseline perplexity {:.6}; relative performance {:.4}",
            base.perplexity, rp
        );
    }
    let artifact = EvalArtifact {
        config: settings.echo("eval"),
        result,
        baseline,
    };
    let path = write_json(&settings.out, "eval.json", &artifact)?;
    println!("report: {}", path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct SweepArtifact {
    config: EffectiveConfig,
    csv: String,
    rows: Vec<SweepRow>,
}

pub fn sweep(args: &SweepArgs) -> Result<()> {
    let settings = Settings::resolve(&args.common)?;
    let model = load_model(&settings)?;
    let calib = load_calibration(&settings, &model)?;
    let eval_set = args.with_loss.then(|| calib.clone());
    let rows = selection::brute_force_sweep(&model, &calib, settings.n, eval_set.as_ref())?;
    let csv = selection::sweep_to_csv(&rows, settings.metric);

    fs::create_dir_all(&settings.out)?;
    let csv_name = "sweep.csv".to_string();
    fs::write(settings.out.join(&csv_name), &csv)?;

    let best = rows
        .iter()
        .min_by(|a, b| {
            let (x, y) = match settings.metric {
                spanfuse::selection::Metric::Cosine => (a.cosine, b.cosine),
                spanfuse::selection::Metric::L2 => (a.l2, b.l2),
            };
            x.total_cmp(&y).then(a.start.cmp(&b.start))
        })
        .ok_or_else(|| Error::Input("sweep produced no candidates".into()))?;
    println!(
        "{} candidates; best start {} ({} distance {:.6}); table: {}",
        rows.len(),
        best.start,
        settings.metric,
        match settings.metric {
            spanfuse::selection::Metric::Cosine => best.cosine,
            spanfuse::selection::Metric::L2 => best.l2,
        },
        settings.out.join(&csv_name).display()
    );
    let artifact = SweepArtifact {
        config: settings.echo("sweep"),
        csv: csv_name,
        rows,
    };
    let path = write_json(&settings.out, "sweep.json", &artifact)?;
    println!("report: {}", path.display());
    Ok(())
}
