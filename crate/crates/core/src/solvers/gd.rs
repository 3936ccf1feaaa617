//! Cosine-objective gradient descent.
//!
//! Two forms of the per-token objective, summed over tokens:
//!
//! - exact:       `Σ_k 1 − cos(m_k·T + y_k, d_k + y_k)`
//!   (compares the reconstructed block output against the true one)
//! - approximate: `Σ_k 1 − cos(m_k·T, d_k)`
//!   (drops `Y`, so capture only has to store `M` and `D`)
//!
//! The two coincide when `Y = 0`. Rows whose compared vectors have norm
//! below 1e-12 are direction-free: they contribute the constant 1 to the
//! value and are excluded from gradients.
//!
//! Minimization is plain Adam over shuffled token mini-batches, identity
//! init, returning the best iterate measured on the full (regularized)
//! objective after each epoch — so the result can never be worse than the
//! identity baseline it starts from.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::parallel;
use crate::solvers::{
    Constraint, EstimationProblem, LinearTransform, RegKind, SolverConfig, SolverKind,
};

const DEGENERATE_NORM: f64 = 1e-12;
/// Tokens per deterministic accumulation chunk; fixed so the parallel and
/// sequential builds fold partial sums in the same order.
const ACCUM_CHUNK: usize = 256;

/// Minimal contract a differentiable objective must satisfy to ride
/// [`adam_minimize`]. Implementations are pure in `t`; NaN values signal
/// divergence to the driver.
pub trait Objective: Sync {
    fn n_tokens(&self) -> usize;
    fn dim(&self) -> usize;
    /// Full objective value (no regularization term).
    fn value(&self, t: &Mat<f64>) -> f64;
    /// Gradient summed over the given token rows (no regularization term).
    fn batch_gradient(&self, t: &Mat<f64>, rows: &[usize]) -> Mat<f64>;
}

/// The per-token cosine objective over an estimation problem.
pub struct CosineObjective<'a> {
    problem: &'a EstimationProblem,
    exact: bool,
}

impl<'a> CosineObjective<'a> {
    pub fn new(problem: &'a EstimationProblem, exact: bool) -> Result<Self> {
        if exact && problem.attn_residual.is_none() {
            return Err(Error::Input(
                "the exact cosine objective needs the captured residual Y".into(),
            ));
        }
        Ok(CosineObjective { problem, exact })
    }

    /// Value and direction-gradient for one token row. Returns the
    /// contribution and, unless the row is degenerate, the gradient of
    /// `1 − cos` with respect to the compared vector `u`.
    fn row_terms(&self, t: &Mat<f64>, row: usize) -> (f64, Option<Vec<f64>>) {
        let dim = self.problem.dim();
        let m_row = self.problem.mlp_out.row(row);
        let d_row = self.problem.target.row(row);
        let mut u = vec![0.0f64; dim];
        for (a, &mv) in m_row.iter().enumerate() {
            let t_row = t.row(a);
            for (uj, &tv) in u.iter_mut().zip(t_row) {
                *uj += mv * tv;
            }
        }
        let l: Vec<f64> = if self.exact {
            let y_row = self
                .problem
                .attn_residual
                .as_ref()
                .expect("checked at construction")
                .row(row);
            for (uj, &yv) in u.iter_mut().zip(y_row) {
                *uj += yv;
            }
            d_row.iter().zip(y_row).map(|(&dv, &yv)| dv + yv).collect()
        } else {
            d_row.to_vec()
        };
        let nu = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nl = l.iter().map(|v| v * v).sum::<f64>().sqrt();
        if nu < DEGENERATE_NORM || nl < DEGENERATE_NORM {
            return (1.0, None);
        }
        let cos = u.iter().zip(&l).map(|(a, b)| a * b).sum::<f64>() / (nu * nl);
        let grad_u: Vec<f64> = u
            .iter()
            .zip(&l)
            .map(|(&uj, &lj)| -lj / (nu * nl) + cos * uj / (nu * nu))
            .collect();
        (1.0 - cos, Some(grad_u))
    }
}

impl Objective for CosineObjective<'_> {
    fn n_tokens(&self) -> usize {
        self.problem.n_tokens()
    }

    fn dim(&self) -> usize {
        self.problem.dim()
    }

    fn value(&self, t: &Mat<f64>) -> f64 {
        let n = self.n_tokens();
        let partials = parallel::map_chunks(n, ACCUM_CHUNK, |range| {
            let mut total = 0.0f64;
            let mut degenerate = 0usize;
            for row in range {
                let (v, grad) = self.row_terms(t, row);
                total += v;
                if grad.is_none() {
                    degenerate += 1;
                }
            }
            (total, degenerate)
        });
        let mut total = 0.0f64;
        let mut degenerate = 0usize;
        for (v, c) in partials {
            total += v;
            degenerate += c;
        }
        if degenerate > 0 {
            log::warn!(
                "{degenerate} of {n} token rows are degenerate (norm < {DEGENERATE_NORM:.0e}); \
                 each contributes the constant 1"
            );
        }
        total
    }

    fn batch_gradient(&self, t: &Mat<f64>, rows: &[usize]) -> Mat<f64> {
        let dim = self.dim();
        let partials = parallel::map_chunks(rows.len(), ACCUM_CHUNK, |range| {
            let mut grad = Mat::zeros(dim, dim);
            for &row in &rows[range] {
                let (_, grad_u) = self.row_terms(t, row);
                let Some(grad_u) = grad_u else { continue };
                let m_row = self.problem.mlp_out.row(row);
                for (a, &mv) in m_row.iter().enumerate() {
                    let g_row = grad.row_mut(a);
                    for (gj, &gu) in g_row.iter_mut().zip(&grad_u) {
                        *gj += mv * gu;
                    }
                }
            }
            grad
        });
        let mut total = Mat::zeros(dim, dim);
        for p in partials {
            total = total.add(&p);
        }
        total
    }
}

/// Objective value at `t` (sum over tokens, no regularization).
pub fn cosine_objective(t: &Mat<f64>, problem: &EstimationProblem, exact: bool) -> Result<f64> {
    Ok(CosineObjective::new(problem, exact)?.value(t))
}

/// Full analytic gradient at `t` (all tokens, no regularization).
pub fn cosine_gradient(t: &Mat<f64>, problem: &EstimationProblem, exact: bool) -> Result<Mat<f64>> {
    let obj = CosineObjective::new(problem, exact)?;
    let rows: Vec<usize> = (0..problem.n_tokens()).collect();
    Ok(obj.batch_gradient(t, &rows))
}

fn reg_value(reg: RegKind, alpha: f64, t: &Mat<f64>) -> f64 {
    match reg {
        RegKind::None => 0.0,
        RegKind::L1 => alpha * t.data().iter().map(|v| v.abs()).sum::<f64>(),
        RegKind::L2 => alpha * t.data().iter().map(|v| v * v).sum::<f64>(),
    }
}

fn add_reg_gradient(grad: &mut Mat<f64>, reg: RegKind, alpha: f64, t: &Mat<f64>) {
    match reg {
        RegKind::None => {}
        RegKind::L1 => {
            for (g, &v) in grad.data_mut().iter_mut().zip(t.data()) {
                // Subgradient of |v|: zero at zero (f64::signum is not).
                let s = if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                *g += alpha * s;
            }
        }
        RegKind::L2 => {
            for (g, &v) in grad.data_mut().iter_mut().zip(t.data()) {
                *g += alpha * 2.0 * v;
            }
        }
    }
}

/// Adam over shuffled token mini-batches, identity init, returning the
/// best iterate (by full regularized objective, checked after each epoch)
/// and its objective value.
pub fn adam_minimize<O: Objective>(
    objective: &O,
    config: &SolverConfig,
    reg: RegKind,
    alpha: f64,
) -> Result<(Mat<f64>, f64)> {
    config.validate()?;
    let n = objective.n_tokens();
    let dim = objective.dim();
    let full = |t: &Mat<f64>| objective.value(t) + reg_value(reg, alpha, t);

    let mut t = Mat::identity(dim);
    let mut best_obj = full(&t);
    if best_obj.is_nan() {
        return Err(Error::Divergence { step: 0 });
    }
    let mut best_t = t.clone();
    let mut m1 = Mat::<f64>::zeros(dim, dim);
    let mut m2 = Mat::<f64>::zeros(dim, dim);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0usize;

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            step += 1;
            let mut grad = objective.batch_gradient(&t, batch);
            // Scale the penalty to the batch's share of tokens so a full
            // pass applies exactly one unit of regularization.
            add_reg_gradient(&mut grad, reg, alpha * batch.len() as f64 / n as f64, &t);
            if !grad.is_finite() {
                return Err(Error::Divergence { step });
            }
            let bias1 = 1.0 - config.beta1.powi(step as i32);
            let bias2 = 1.0 - config.beta2.powi(step as i32);
            for ((tv, &g), (m1v, m2v)) in t
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m1.data_mut().iter_mut().zip(m2.data_mut().iter_mut()))
            {
                *m1v = config.beta1 * *m1v + (1.0 - config.beta1) * g;
                *m2v = config.beta2 * *m2v + (1.0 - config.beta2) * g * g;
                let m_hat = *m1v / bias1;
                let v_hat = *m2v / bias2;
                *tv -= config.lr * m_hat / (v_hat.sqrt() + config.eps);
            }
            if !t.is_finite() {
                return Err(Error::Divergence { step });
            }
        }
        let obj = full(&t);
        if obj.is_nan() {
            return Err(Error::Divergence { step });
        }
        if obj < best_obj {
            best_obj = obj;
            best_t = t.clone();
        }
    }
    Ok((best_t, best_obj))
}

/// Gradient-descent estimation of T under the cosine objective, with an
/// optional L1/L2 penalty of strength `alpha`.
pub fn solve_cosine_gd(
    problem: &EstimationProblem,
    config: &SolverConfig,
    reg: RegKind,
    alpha: f64,
    exact: bool,
) -> Result<LinearTransform> {
    if alpha < 0.0 || alpha.is_nan() {
        return Err(Error::Input(format!(
            "regularization strength must be nonnegative, got {alpha}"
        )));
    }
    if reg == RegKind::None && alpha != 0.0 {
        return Err(Error::Input(
            "nonzero alpha without a regularization kind has no effect; pick l1 or l2".into(),
        ));
    }
    let objective = CosineObjective::new(problem, exact)?;
    let (matrix, objective_value) = adam_minimize(&objective, config, reg, alpha)?;
    Ok(LinearTransform {
        matrix,
        constraint: Constraint::Generic,
        solver: SolverKind::CosineGd,
        alpha,
        reg_kind: reg,
        objective_value,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solvers::test_support::random_problem;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn finite_difference_gradient(
        problem: &EstimationProblem,
        t: &Mat<f64>,
        exact: bool,
    ) -> Mat<f64> {
        let h = 1e-4;
        let dim = problem.dim();
        Mat::from_fn(dim, dim, |a, b| {
            let mut plus = t.clone();
            plus.set(a, b, plus.get(a, b) + h);
            let mut minus = t.clone();
            minus.set(a, b, minus.get(a, b) - h);
            let fp = cosine_objective(&plus, problem, exact).unwrap();
            let fm = cosine_objective(&minus, problem, exact).unwrap();
            (fp - fm) / (2.0 * h)
        })
    }

    fn problem_with_residual(seed: u64, n: usize, d: usize) -> EstimationProblem {
        let mut rng = StdRng::seed_from_u64(seed);
        let p = random_problem(seed, n, d);
        let y = Mat::from_fn(n, d, |_, _| rng.gen_range(-1.0..1.0));
        p.with_residual(y).unwrap()
    }

    #[test]
    fn single_token_objective_matches_hand_value() {
        // m = (1, 0), d = (0, 1), T = I: compared vectors are orthogonal,
        // so the distance is exactly 1.
        let p = EstimationProblem::new(
            Mat::from_vec(1, 2, vec![1.0, 0.0]),
            Mat::from_vec(1, 2, vec![0.0, 1.0]),
        )
        .unwrap();
        let v = cosine_objective(&Mat::identity(2), &p, false).unwrap();
        assert!((v - 1.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_alignment_has_zero_objective() {
        let p = random_problem(1, 16, 4);
        let aligned = EstimationProblem::new(p.mlp_out.clone(), p.mlp_out.clone()).unwrap();
        let v = cosine_objective(&Mat::identity(4), &aligned, false).unwrap();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn degenerate_rows_contribute_exactly_one() {
        // Second row of M is zero: direction-free.
        let p = EstimationProblem::new(
            Mat::from_vec(2, 2, vec![1.0, 0.0, 0.0, 0.0]),
            Mat::from_vec(2, 2, vec![1.0, 0.0, 1.0, 1.0]),
        )
        .unwrap();
        let v = cosine_objective(&Mat::identity(2), &p, false).unwrap();
        // Row 1 aligns perfectly (0), row 2 is degenerate (1).
        assert!((v - 1.0).abs() < 1e-15);
        // And it is excluded from the gradient.
        let g = cosine_gradient(&Mat::identity(2), &p, false).unwrap();
        assert!(g.is_finite());
    }

    #[test]
    fn approximate_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let p = random_problem(seed, 8, 4);
            let t = Mat::from_fn(4, 4, |a, b| {
                if a == b {
                    1.0
                } else {
                    0.1 * (a as f64 - b as f64)
                }
            });
            let analytic = cosine_gradient(&t, &p, false).unwrap();
            let fd = finite_difference_gradient(&p, &t, false);
            let diff = analytic.max_abs_diff(&fd);
            assert!(
                diff < 1e-3 * fd.max_abs().max(1e-8),
                "seed {seed}: gradient off by {diff}"
            );
        }
    }

    #[test]
    fn exact_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let p = problem_with_residual(50 + seed, 8, 4);
            let t = Mat::identity(4);
            let analytic = cosine_gradient(&t, &p, true).unwrap();
            let fd = finite_difference_gradient(&p, &t, true);
            let diff = analytic.max_abs_diff(&fd);
            assert!(
                diff < 1e-3 * fd.max_abs().max(1e-8),
                "seed {seed}: gradient off by {diff}"
            );
        }
    }

    #[test]
    fn exact_equals_approximate_when_residual_is_zero() {
        let p = random_problem(7, 16, 4);
        let with_zero_y = p.clone().with_residual(Mat::zeros(16, 4)).unwrap();
        let t = Mat::from_fn(4, 4, |a, b| 0.5 * ((a + 2 * b) as f64).cos());
        let exact = cosine_objective(&t, &with_zero_y, true).unwrap();
        let approx = cosine_objective(&t, &with_zero_y, false).unwrap();
        assert!(
            (exact - approx).abs() < 1e-12,
            "objectives split: {exact} vs {approx}"
        );
    }

    #[test]
    fn exact_objective_without_residual_is_an_input_error() {
        let p = random_problem(8, 8, 4);
        assert!(matches!(
            cosine_objective(&Mat::identity(4), &p, true),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn already_optimal_problem_returns_identity() {
        let p = random_problem(9, 32, 4);
        let aligned = EstimationProblem::new(p.mlp_out.clone(), p.mlp_out.clone()).unwrap();
        let config = SolverConfig {
            seed: 3,
            ..SolverConfig::default()
        };
        let lt = solve_cosine_gd(&aligned, &config, RegKind::None, 0.0, false).unwrap();
        // Zero gradient everywhere: Adam never moves off the identity.
        assert_eq!(lt.matrix, Mat::identity(4));
        assert!(lt.objective_value.abs() < 1e-12);
    }

    #[test]
    fn best_iterate_never_exceeds_identity_objective() {
        for seed in 0..3 {
            let p = random_problem(20 + seed, 64, 6);
            let at_identity = cosine_objective(&Mat::identity(6), &p, false).unwrap();
            let config = SolverConfig {
                lr: 1e-2,
                batch_size: 16,
                epochs: 5,
                seed,
                ..SolverConfig::default()
            };
            let lt = solve_cosine_gd(&p, &config, RegKind::None, 0.0, false).unwrap();
            assert!(lt.objective_value <= at_identity);
        }
    }

    #[test]
    fn descent_makes_real_progress_on_a_reachable_target() {
        // Target reachable by a transform near identity.
        let p = random_problem(30, 128, 4);
        let t_star = Mat::from_fn(4, 4, |a, b| {
            if a == b {
                1.2
            } else {
                0.3 * ((a * 4 + b) as f64 * 0.7).sin()
            }
        });
        let reachable =
            EstimationProblem::new(p.mlp_out.clone(), p.mlp_out.matmul(&t_star)).unwrap();
        let at_identity = cosine_objective(&Mat::identity(4), &reachable, false).unwrap();
        let config = SolverConfig {
            lr: 1e-2,
            batch_size: 32,
            epochs: 40,
            seed: 11,
            ..SolverConfig::default()
        };
        let lt = solve_cosine_gd(&reachable, &config, RegKind::None, 0.0, false).unwrap();
        assert!(
            lt.objective_value < 0.5 * at_identity,
            "objective only moved from {at_identity} to {}",
            lt.objective_value
        );
    }

    #[test]
    fn gd_is_seed_deterministic() {
        let p = random_problem(40, 64, 4);
        let config = SolverConfig {
            lr: 1e-3,
            batch_size: 16,
            epochs: 3,
            seed: 5,
            ..SolverConfig::default()
        };
        let a = solve_cosine_gd(&p, &config, RegKind::L2, 1e-3, false).unwrap();
        let b = solve_cosine_gd(&p, &config, RegKind::L2, 1e-3, false).unwrap();
        assert_eq!(a.matrix, b.matrix);
        let other = SolverConfig { seed: 6, ..config };
        let c = solve_cosine_gd(&p, &other, RegKind::L2, 1e-3, false).unwrap();
        assert_ne!(a.matrix, c.matrix);
    }

    #[test]
    fn l1_regularization_does_not_reduce_sparsity() {
        let p = random_problem(41, 64, 4);
        let config = SolverConfig {
            lr: 1e-2,
            batch_size: 32,
            epochs: 20,
            seed: 7,
            ..SolverConfig::default()
        };
        let near_zero = |m: &Mat<f64>| m.data().iter().filter(|v| v.abs() < 1e-6).count();
        let plain = solve_cosine_gd(&p, &config, RegKind::None, 0.0, false).unwrap();
        let l1 = solve_cosine_gd(&p, &config, RegKind::L1, 1e-4, false).unwrap();
        assert!(near_zero(&l1.matrix) >= near_zero(&plain.matrix));
    }

    #[test]
    fn nan_objective_is_reported_as_divergence() {
        // Scales chosen so the norm computation overflows to inf and the
        // cosine becomes inf/inf = NaN.
        let m = Mat::from_fn(4, 4, |r, c| 1e200 * ((r + c) as f64 + 1.0));
        let d = Mat::from_fn(4, 4, |r, c| 1e200 * ((r * c) as f64 + 1.0));
        let p = EstimationProblem::new(m, d).unwrap();
        let config = SolverConfig::default();
        let err = solve_cosine_gd(&p, &config, RegKind::None, 0.0, false).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }), "got {err}");
    }

    #[test]
    fn alpha_without_reg_kind_is_rejected() {
        let p = random_problem(42, 8, 4);
        let config = SolverConfig::default();
        assert!(matches!(
            solve_cosine_gd(&p, &config, RegKind::None, 0.5, false),
            Err(Error::Input(_))
        ));
    }
}
