//! Closed-form solvers: least squares, ridge, diagonal, orthogonal.

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::solvers::{
    mean_sq_residual, Constraint, EstimationProblem, LinearTransform, RegKind, SolverKind,
};

/// Condition-number ceiling for the (possibly shifted) normal-equations
/// matrix. Past this, the Cholesky solution is numerically meaningless.
const CONDITION_LIMIT: f64 = 1e12;

/// Solves `(MᵀM + αI) T = MᵀD`. Least squares is the α = 0 case — both
/// paths share this routine, so `solve_ridge(p, 0.0)` and `solve_ls(p)`
/// produce bitwise-identical matrices.
fn solve_normal_equations(m: &Mat<f64>, d: &Mat<f64>, alpha: f64) -> Result<Mat<f64>> {
    let mut gram = m.gram();
    for i in 0..gram.rows() {
        gram.set(i, i, gram.get(i, i) + alpha);
    }
    let factors = linalg::svd(&gram)?;
    let condition = factors.condition();
    if condition > CONDITION_LIMIT {
        return Err(Error::RankDeficient { condition });
    }
    let rhs = m.transpose_matmul(d);
    linalg::solve_spd(&gram, &rhs)
}

/// Unconstrained least squares: `T = (MᵀM)⁻¹ MᵀD`.
pub fn solve_ls(problem: &EstimationProblem) -> Result<LinearTransform> {
    let t = solve_normal_equations(&problem.mlp_out, &problem.target, 0.0)?;
    Ok(LinearTransform {
        objective_value: mean_sq_residual(&problem.mlp_out, &t, &problem.target),
        matrix: t,
        constraint: Constraint::Generic,
        solver: SolverKind::Ls,
        alpha: 0.0,
        reg_kind: RegKind::None,
    })
}

/// Tikhonov-regularized least squares: `T = (MᵀM + αI)⁻¹ MᵀD`.
pub fn solve_ridge(problem: &EstimationProblem, alpha: f64) -> Result<LinearTransform> {
    if alpha < 0.0 || alpha.is_nan() {
        return Err(Error::Input(format!(
            "ridge strength must be nonnegative, got {alpha}"
        )));
    }
    let t = solve_normal_equations(&problem.mlp_out, &problem.target, alpha)?;
    Ok(LinearTransform {
        objective_value: mean_sq_residual(&problem.mlp_out, &t, &problem.target),
        matrix: t,
        constraint: Constraint::Generic,
        solver: SolverKind::Ridge,
        alpha,
        reg_kind: RegKind::L2,
    })
}

/// Diagonal-constrained least squares. Each coordinate decouples into a
/// scalar regression: `T_jj = (m_j · d_j) / (m_j · m_j)` over columns of M
/// and D.
pub fn solve_diagonal(problem: &EstimationProblem) -> Result<LinearTransform> {
    let m = &problem.mlp_out;
    let d = &problem.target;
    let dim = problem.dim();
    let mut t = Mat::zeros(dim, dim);
    for j in 0..dim {
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for r in 0..m.rows() {
            let mj = m.get(r, j);
            num += mj * d.get(r, j);
            den += mj * mj;
        }
        if den == 0.0 {
            return Err(Error::Degenerate(format!(
                "column {j} of M has zero norm; its scale is unidentifiable"
            )));
        }
        t.set(j, j, num / den);
    }
    Ok(LinearTransform {
        objective_value: mean_sq_residual(m, &t, d),
        matrix: t,
        constraint: Constraint::Diagonal,
        solver: SolverKind::Diag,
        alpha: 0.0,
        reg_kind: RegKind::None,
    })
}

/// Orthogonal-constrained fit (Procrustes): `T = U Vᵀ` from the SVD of
/// `MᵀD`. The constraint `TᵀT = I` holds by construction.
pub fn solve_orthogonal(problem: &EstimationProblem) -> Result<LinearTransform> {
    let cross = problem.mlp_out.transpose_matmul(&problem.target);
    if cross.max_abs() == 0.0 {
        return Err(Error::Degenerate(
            "MᵀD is identically zero; every orthogonal T attains the same objective".into(),
        ));
    }
    let factors = linalg::svd(&cross)?;
    let t = factors.u.matmul(&factors.v.transpose());
    Ok(LinearTransform {
        objective_value: mean_sq_residual(&problem.mlp_out, &t, &problem.target),
        matrix: t,
        constraint: Constraint::Orthogonal,
        solver: SolverKind::Ortho,
        alpha: 0.0,
        reg_kind: RegKind::None,
    })
}
