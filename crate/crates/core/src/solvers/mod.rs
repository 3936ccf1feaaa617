//! Estimation of the replacement transform T.
//!
//! Given captured activations for a span — the host block's MLP output `M`
//! and the difference `D = L_end − Y` between the span's output and the
//! host's post-attention residual — these solvers produce a d×d matrix `T`
//! such that `Y + M·T` approximates `L_end`. Five regimes: least squares
//! (closed form), ridge, diagonal-constrained, orthogonal-constrained
//! (Procrustes), and gradient descent on a per-token cosine objective.
//!
//! All solver arithmetic runs in 64-bit; the normal equations square the
//! condition number, and the fused weights are consumed in 32-bit anyway.

mod analytic;
mod gd;
mod ltfile;

pub use analytic::{solve_diagonal, solve_ls, solve_orthogonal, solve_ridge};
pub use gd::{cosine_gradient, cosine_objective, solve_cosine_gd, Objective};
pub use ltfile::{load_transform, save_transform, TRANSFORM_MAGIC};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::model::SpanActivations;
use crate::parallel;

/// Captured data for one span, in solver precision.
#[derive(Debug, Clone)]
pub struct EstimationProblem {
    /// Host block MLP output `M` `[N x d]`.
    pub mlp_out: Mat<f64>,
    /// Target residual `D = L_end − Y` `[N x d]`.
    pub target: Mat<f64>,
    /// Host block post-attention residual `Y` `[N x d]`; needed only by the
    /// exact cosine objective, `None` keeps the memory-light layout.
    pub attn_residual: Option<Mat<f64>>,
}

impl EstimationProblem {
    pub fn new(mlp_out: Mat<f64>, target: Mat<f64>) -> Result<Self> {
        if mlp_out.rows() != target.rows() || mlp_out.cols() != target.cols() {
            return Err(Error::Input(format!(
                "activation shapes disagree: M is {}x{}, D is {}x{}",
                mlp_out.rows(),
                mlp_out.cols(),
                target.rows(),
                target.cols()
            )));
        }
        if mlp_out.rows() == 0 {
            return Err(Error::Input("estimation problem has zero tokens".into()));
        }
        if mlp_out.rows() < mlp_out.cols() {
            log::warn!(
                "estimation problem has fewer tokens ({}) than dimensions ({}); \
                 the system is underdetermined",
                mlp_out.rows(),
                mlp_out.cols()
            );
        }
        Ok(EstimationProblem {
            mlp_out,
            target,
            attn_residual: None,
        })
    }

    pub fn with_residual(mut self, attn_residual: Mat<f64>) -> Result<Self> {
        if attn_residual.rows() != self.mlp_out.rows()
            || attn_residual.cols() != self.mlp_out.cols()
        {
            return Err(Error::Input("residual shape disagrees with M".into()));
        }
        self.attn_residual = Some(attn_residual);
        Ok(self)
    }

    /// Builds the problem from captured span activations, converting to
    /// 64-bit. `keep_residual` retains `Y` for the exact cosine objective.
    pub fn from_span(span: &SpanActivations, keep_residual: bool) -> Result<Self> {
        let y = span.y_start.to_f64();
        let target = span.l_end.to_f64().sub(&y);
        let problem = EstimationProblem::new(span.m_start.to_f64(), target)?;
        if keep_residual {
            problem.with_residual(y)
        } else {
            Ok(problem)
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.mlp_out.rows()
    }

    pub fn dim(&self) -> usize {
        self.mlp_out.cols()
    }
}

/// Structural constraint the solver enforced on T.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    Generic,
    Diagonal,
    Orthogonal,
}

/// Which estimation routine produced a transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    Ls,
    Ridge,
    Diag,
    Ortho,
    CosineGd,
}

/// Regularization penalty attached to the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegKind {
    None,
    L1,
    L2,
}

/// An estimated d×d replacement transform plus its provenance.
///
/// `objective_value` is the solver's own objective at the returned T:
/// mean squared residual `‖M·T − D‖² / N` for the analytic solvers, the
/// (regularized) cosine objective for gradient descent.
#[derive(Debug, Clone)]
pub struct LinearTransform {
    pub matrix: Mat<f64>,
    pub constraint: Constraint,
    pub solver: SolverKind,
    pub alpha: f64,
    pub reg_kind: RegKind,
    pub objective_value: f64,
}

/// Gradient-descent hyperparameters. Defaults: learning rate 1e-4, batch
/// of 1024 tokens, 10 epochs, identity init, Adam moments (0.9, 0.999),
/// eps 1e-8.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            lr: 1e-4,
            batch_size: 1024,
            epochs: 10,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Full description of one estimation run: routine plus its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SolverSpec {
    Ls,
    Ridge {
        alpha: f64,
    },
    Diagonal,
    Orthogonal,
    CosineGd {
        config: SolverConfig,
        reg: RegKind,
        alpha: f64,
        /// Optimize the exact objective (needs Y) instead of the
        /// memory-light approximation.
        exact: bool,
    },
}

impl SolverSpec {
    pub fn kind(&self) -> SolverKind {
        match self {
            SolverSpec::Ls => SolverKind::Ls,
            SolverSpec::Ridge { .. } => SolverKind::Ridge,
            SolverSpec::Diagonal => SolverKind::Diag,
            SolverSpec::Orthogonal => SolverKind::Ortho,
            SolverSpec::CosineGd { .. } => SolverKind::CosineGd,
        }
    }

    /// Whether problems built for this spec must retain `Y`.
    pub fn needs_residual(&self) -> bool {
        matches!(self, SolverSpec::CosineGd { exact: true, .. })
    }
}

/// Runs the routine described by `spec` on one problem.
pub fn solve(problem: &EstimationProblem, spec: &SolverSpec) -> Result<LinearTransform> {
    match spec {
        SolverSpec::Ls => solve_ls(problem),
        SolverSpec::Ridge { alpha } => solve_ridge(problem, *alpha),
        SolverSpec::Diagonal => solve_diagonal(problem),
        SolverSpec::Orthogonal => solve_orthogonal(problem),
        SolverSpec::CosineGd {
            config,
            reg,
            alpha,
            exact,
        } => solve_cosine_gd(problem, config, *reg, *alpha, *exact),
    }
}

/// Independent estimation for several groups' problems (one transform
/// each, concurrently when enabled). Callers capture problems from a
/// normalized plan, so back-to-back groups have already been merged into
/// single spans; an empty list yields an empty list.
pub fn solve_multi(
    problems: &[EstimationProblem],
    spec: &SolverSpec,
) -> Result<Vec<LinearTransform>> {
    let results: Vec<Result<LinearTransform>> = parallel::map_slice(problems, |p| solve(p, spec));
    results.into_iter().collect()
}

/// Mean squared residual `‖M·T − D‖² / N`.
pub(crate) fn mean_sq_residual(m: &Mat<f64>, t: &Mat<f64>, d: &Mat<f64>) -> f64 {
    let r = m.matmul(t).sub(d);
    r.data().iter().map(|v| v * v).sum::<f64>() / m.rows() as f64
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    /// Seeded dense problem with well-behaved scales.
    pub fn random_problem(seed: u64, n: usize, d: usize) -> EstimationProblem {
        let mut rng = StdRng::seed_from_u64(seed);
        let m = Mat::from_fn(n, d, |_, _| rng.gen_range(-1.0..1.0));
        let t = Mat::from_fn(n, d, |_, _| rng.gen_range(-1.0..1.0));
        EstimationProblem::new(m, t).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::test_support::random_problem;
    use super::*;

    #[test]
    fn shape_mismatch_is_an_input_error() {
        let m = Mat::<f64>::zeros(4, 3);
        let d = Mat::<f64>::zeros(4, 2);
        assert!(EstimationProblem::new(m, d).is_err());
    }

    #[test]
    fn solve_multi_matches_separate_solves() {
        let problems = vec![random_problem(1, 32, 4), random_problem(2, 32, 4)];
        let spec = SolverSpec::Ls;
        let multi = solve_multi(&problems, &spec).unwrap();
        for (p, lt) in problems.iter().zip(&multi) {
            let single = solve(p, &spec).unwrap();
            assert_eq!(single.matrix, lt.matrix);
        }
    }

    #[test]
    fn solve_multi_on_empty_list_is_empty() {
        assert!(solve_multi(&[], &SolverSpec::Ls).unwrap().is_empty());
    }

    #[test]
    fn spec_kind_and_residual_flags() {
        assert_eq!(SolverSpec::Ls.kind(), SolverKind::Ls);
        assert!(!SolverSpec::Ls.needs_residual());
        let gd = SolverSpec::CosineGd {
            config: SolverConfig::default(),
            reg: RegKind::None,
            alpha: 0.0,
            exact: true,
        };
        assert!(gd.needs_residual());
        assert_eq!(gd.kind(), SolverKind::CosineGd);
    }
}
