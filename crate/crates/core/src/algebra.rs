//! Dense small-matrix control computations.
//!
//! Everything here works on `nalgebra` dynamic matrices and targets the
//! desk-scale regime (state dimension up to a few dozen). The discrete
//! Lyapunov equation is solved by Kronecker vectorization and the Riccati
//! equation by value iteration.

use nalgebra::{Cholesky, DMatrix, DVector, Schur, SymmetricEigen};

use crate::error::{invalid, Error, Result};
use crate::system::LinearSystem;

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative singular-value cutoff used by [`pseudo_inverse`].
pub const PINV_RELATIVE_CUTOFF: f64 = 1e-12;

fn require_square(m: &Matrix, name: &str) -> Result<usize> {
    if !m.is_square() {
        return Err(invalid(format!(
            "{name} must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(m.nrows())
}

fn require_finite(m: &Matrix, name: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(invalid(format!("{name} has non-finite entries")))
    }
}

pub fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

pub fn is_symmetric(m: &Matrix, tol: f64) -> bool {
    m.is_square() && (m - m.transpose()).amax() <= tol
}

/// Largest singular value.
pub fn spectral_norm(m: &Matrix) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .cloned()
        .fold(0.0, f64::max)
}

pub fn min_eigenvalue(sym: &Matrix) -> f64 {
    SymmetricEigen::new(sym.clone())
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

pub fn max_eigenvalue(sym: &Matrix) -> f64 {
    SymmetricEigen::new(sym.clone())
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Spectral radius `max |λ|` of a square matrix.
///
/// Uses a real Schur decomposition; if that fails to converge, falls back
/// to Gelfand's formula.
pub fn spectral_radius(m: &Matrix) -> Result<f64> {
    let n = require_square(m, "matrix")?;
    require_finite(m, "matrix")?;
    if n == 0 {
        return Ok(0.0);
    }
    match Schur::try_new(m.clone(), f64::EPSILON, 100_000) {
        Some(schur) => Ok(schur
            .complex_eigenvalues()
            .iter()
            .map(|c| c.norm())
            .fold(0.0, f64::max)),
        None => Ok(gelfand_spectral_radius(m)),
    }
}

/// `lim ‖M^(2^j)‖^(1/2^j)` by repeated squaring with renormalization,
/// stopped once the relative change drops below 1e-6.
pub fn gelfand_spectral_radius(m: &Matrix) -> f64 {
    let base = m.norm();
    if base == 0.0 {
        return 0.0;
    }
    let mut power = m / base;
    let mut log_scale = base.ln();
    let mut exponent = 1.0_f64;
    let mut estimate = base;
    for _ in 0..64 {
        power = &power * &power;
        log_scale *= 2.0;
        exponent *= 2.0;
        let s = power.norm();
        if s == 0.0 {
            return 0.0;
        }
        power /= s;
        log_scale += s.ln();
        let next = (log_scale / exponent).exp();
        let change = (next - estimate).abs() / next.max(f64::MIN_POSITIVE);
        estimate = next;
        if change < 1e-6 {
            break;
        }
    }
    estimate
}

/// Moore–Penrose pseudo-inverse via SVD.
///
/// Singular values below `1e-12 · max(rows, cols) · σ_max` are treated as zero.
pub fn pseudo_inverse(m: &Matrix) -> Matrix {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return Matrix::zeros(cols, rows);
    }
    let svd = m.clone().svd(true, true);
    let sigma_max = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let cutoff = PINV_RELATIVE_CUTOFF * rows.max(cols) as f64 * sigma_max;
    let u = svd.u.as_ref().expect("left singular vectors requested");
    let v_t = svd.v_t.as_ref().expect("right singular vectors requested");
    let mut out = Matrix::zeros(cols, rows);
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff && s > 0.0 {
            let v = v_t.row(i).transpose();
            let ui = u.column(i);
            out.ger(1.0 / s, &v, &ui, 1.0);
        }
    }
    out
}

/// `I − Ãᵀ⊗Ãᵀ`, the vectorized Lyapunov operator for `ÃᵀXÃ − X`.
fn lyapunov_operator(a: &Matrix) -> Matrix {
    let at = a.transpose();
    let n2 = a.nrows() * a.nrows();
    Matrix::identity(n2, n2) - at.kronecker(&at)
}

fn require_stable(a: &Matrix, what: &'static str) -> Result<f64> {
    let rho = spectral_radius(a)?;
    if rho >= 1.0 {
        return Err(Error::Unstable { what, rho });
    }
    Ok(rho)
}

pub fn lyapunov_residual(a: &Matrix, x: &Matrix, qm: &Matrix) -> f64 {
    (a.transpose() * x * a - x + qm).norm()
}

/// Solves `ÃᵀXÃ − X + Qm = 0` for stable `Ã`.
pub fn solve_dlyap(a: &Matrix, qm: &Matrix) -> Result<Matrix> {
    let n = require_square(a, "Lyapunov matrix")?;
    if qm.shape() != (n, n) {
        return Err(invalid(format!(
            "Lyapunov weight must be {n}x{n}, got {}x{}",
            qm.nrows(),
            qm.ncols()
        )));
    }
    require_finite(qm, "Lyapunov weight")?;
    if !is_symmetric(qm, 1e-9 * (1.0 + qm.norm())) {
        return Err(invalid("Lyapunov weight must be symmetric"));
    }
    require_stable(a, "Lyapunov matrix")?;
    if n == 0 {
        return Ok(Matrix::zeros(0, 0));
    }

    let lu = lyapunov_operator(a).lu();
    let solve = |rhs: &Matrix| -> Result<Matrix> {
        let v = DVector::from_column_slice(rhs.as_slice());
        let sol = lu
            .solve(&v)
            .ok_or_else(|| invalid("singular Lyapunov operator"))?;
        Ok(Matrix::from_column_slice(n, n, sol.as_slice()))
    };

    let mut x = symmetrize(&solve(qm)?);
    let tol = 1e-9 * (1.0 + qm.norm());
    // one step of iterative refinement if the direct solve lost accuracy
    if lyapunov_residual(a, &x, qm) > tol {
        let r = a.transpose() * &x * a - &x + qm;
        x = symmetrize(&(x + solve(&symmetrize(&r))?));
    }
    Ok(x)
}

/// `‖(I − Ãᵀ⊗Ãᵀ)⁻¹‖₂`.
pub fn lyapunov_inverse_norm(a: &Matrix) -> Result<f64> {
    require_square(a, "Lyapunov matrix")?;
    require_stable(a, "Lyapunov matrix")?;
    if a.is_empty() {
        return Ok(0.0);
    }
    let sv = lyapunov_operator(a).svd(false, false).singular_values;
    let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(1.0 / smin)
}

/// Upper bound `‖(I − Ãᵀ⊗Ãᵀ)⁻¹‖₂ · ‖Qm‖_F` on `‖X‖_F` for the solution
/// of `ÃᵀXÃ − X + Qm = 0`.
pub fn lyap_norm_bound(a: &Matrix, qm: &Matrix) -> Result<f64> {
    Ok(lyapunov_inverse_norm(a)? * qm.norm())
}

/// Effective input weight `R + BᵀP*B` for the cost-sensitivity bound.
///
/// The closed-loop value matrix of a perturbed gain `K* + ΔK` satisfies
/// `ΔP = ΔKᵀ(R + BᵀP*B)ΔK + ÃᵀΔPÃ`.
pub fn sensitivity_weight(b: &Matrix, r: &Matrix, p_star: &Matrix) -> Matrix {
    r + b.transpose() * p_star * b
}

/// `‖(I − Ãᵀ⊗Ãᵀ)⁻¹‖₂ · ‖weight‖_F · ‖ΔK‖²_F`, bounding `‖P_K̂ − P*‖_F`
/// when `weight` is [`sensitivity_weight`] and `Ã = A + BK̂`.
pub fn riccati_sensitivity_bound(closed_loop: &Matrix, weight: &Matrix, delta_k: &Matrix) -> Result<f64> {
    let d = delta_k.norm();
    Ok(lyapunov_inverse_norm(closed_loop)? * weight.norm() * d * d)
}

#[derive(Debug, Clone, Copy)]
pub struct DareOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for DareOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-12,
            max_iterations: 100_000,
        }
    }
}

/// Stabilizing DARE solution and the associated LQR gain.
#[derive(Debug, Clone)]
pub struct GainSolution {
    pub p: Matrix,
    pub k: Matrix,
    pub closed_loop_rho: f64,
    pub iterations: usize,
    pub residual: f64,
}

pub fn dare_residual(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix, p: &Matrix) -> f64 {
    let btp = b.transpose() * p;
    let s = r + &btp * b;
    let btpa = &btp * a;
    let correction = match Cholesky::new(s) {
        Some(c) => btpa.transpose() * c.solve(&btpa),
        None => return f64::INFINITY,
    };
    (q + a.transpose() * p * a - correction - p).norm()
}

/// LQR gain `−(R + BᵀPB)⁻¹BᵀPA` for a given value matrix.
pub fn lqr_gain(a: &Matrix, b: &Matrix, r: &Matrix, p: &Matrix) -> Result<Matrix> {
    let btp = b.transpose() * p;
    let chol = Cholesky::new(r + &btp * b)
        .ok_or_else(|| Error::DareFailure("R + BᵀPB is not positive definite".into()))?;
    Ok(-chol.solve(&(btp * a)))
}

pub fn solve_dare(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix) -> Result<GainSolution> {
    solve_dare_with(a, b, q, r, &DareOptions::default())
}

/// Value iteration `P ← Q + AᵀPA − AᵀPB(R+BᵀPB)⁻¹BᵀPA` from `P = Q`.
pub fn solve_dare_with(
    a: &Matrix,
    b: &Matrix,
    q: &Matrix,
    r: &Matrix,
    opts: &DareOptions,
) -> Result<GainSolution> {
    let n = require_square(a, "A")?;
    let p_dim = require_square(r, "R")?;
    if b.shape() != (n, p_dim) || q.shape() != (n, n) {
        return Err(invalid(format!(
            "inconsistent Riccati dimensions: A {n}x{n}, B {}x{}, Q {}x{}, R {p_dim}x{p_dim}",
            b.nrows(),
            b.ncols(),
            q.nrows(),
            q.ncols()
        )));
    }
    for (m, name) in [(a, "A"), (b, "B"), (q, "Q"), (r, "R")] {
        require_finite(m, name)?;
    }
    for (m, name) in [(q, "Q"), (r, "R")] {
        if !is_symmetric(m, 1e-10 * (1.0 + m.norm())) || Cholesky::new(m.clone()).is_none() {
            return Err(invalid(format!("{name} must be symmetric positive definite")));
        }
    }

    let at = a.transpose();
    let bt = b.transpose();
    let mut p = q.clone();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iterations {
        iterations += 1;
        let btp = &bt * &p;
        let btpa = &btp * a;
        let chol = Cholesky::new(r + &btp * b).ok_or_else(|| {
            Error::DareFailure(format!("R + BᵀPB lost definiteness at iteration {iterations}"))
        })?;
        let next = symmetrize(&(q + &at * &p * a - btpa.transpose() * chol.solve(&btpa)));
        if !next.iter().all(|v| v.is_finite()) {
            return Err(Error::DareFailure(format!(
                "iteration diverged at iteration {iterations}"
            )));
        }
        let change = (&next - &p).norm();
        let scale = next.norm();
        p = next;
        if change <= opts.tolerance * scale.max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::DareFailure(format!(
            "no convergence within {} iterations",
            opts.max_iterations
        )));
    }

    let k = lqr_gain(a, b, r, &p)?;
    let closed_loop_rho = spectral_radius(&(a + b * &k))?;
    if closed_loop_rho >= 1.0 {
        return Err(Error::DareFailure(format!(
            "closed loop not stable (spectral radius {closed_loop_rho:.6})"
        )));
    }
    if min_eigenvalue(&p) <= 0.0 {
        return Err(Error::DareFailure("solution is not positive definite".into()));
    }
    let residual = dare_residual(a, b, q, r, &p);
    Ok(GainSolution {
        p,
        k,
        closed_loop_rho,
        iterations,
        residual,
    })
}

/// Value matrix `P_K = Q + KᵀRK + (A+BK)ᵀP_K(A+BK)` of the linear policy `u = Kx`.
pub fn closed_loop_value(sys: &LinearSystem, k: &Matrix) -> Result<Matrix> {
    if k.shape() != (sys.p(), sys.n()) {
        return Err(invalid(format!(
            "gain must be {}x{}, got {}x{}",
            sys.p(),
            sys.n(),
            k.nrows(),
            k.ncols()
        )));
    }
    let closed = sys.closed_loop(k);
    let weight = symmetrize(&(&sys.q + k.transpose() * &sys.r * k));
    solve_dlyap(&closed, &weight).map_err(|e| match e {
        Error::Unstable { rho, .. } => Error::Unstable {
            what: "closed loop",
            rho,
        },
        other => other,
    })
}

/// Infinite-horizon average cost `Tr(W·P_K)` of `u = Kx`.
///
/// An unstable closed loop (the destabilizing case) is reported as
/// [`Error::Unstable`].
pub fn policy_cost(sys: &LinearSystem, k: &Matrix) -> Result<f64> {
    Ok((&sys.w * closed_loop_value(sys, k)?).trace())
}
