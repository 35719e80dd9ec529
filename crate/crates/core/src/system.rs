//! Plant model, Gaussian sampling and system generation.

use std::path::Path;

use nalgebra::{Cholesky, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::algebra::{is_symmetric, min_eigenvalue, spectral_radius, Matrix, Vector};
use crate::error::{invalid, Error, Result};

const SYMMETRY_TOL: f64 = 1e-10;
const PSD_TOL: f64 = 1e-10;
/// Eigenvalues below `-COV_TOL` make a covariance unusable for sampling.
const COV_TOL: f64 = 1e-8;

/// `x_{k+1} = A x_k + B u_k + w_k` with `w_k ~ N(0, W)`, `x_0 ~ N(0, X0)`
/// and stage cost `xᵀQx + uᵀRu`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    pub a: Matrix,
    pub b: Matrix,
    pub w: Matrix,
    pub x0: Matrix,
    pub q: Matrix,
    pub r: Matrix,
}

impl LinearSystem {
    pub fn new(a: Matrix, b: Matrix, w: Matrix, x0: Matrix, q: Matrix, r: Matrix) -> Result<Self> {
        let n = a.nrows();
        let p = b.ncols();
        if n == 0 || p == 0 {
            return Err(invalid("state and input dimensions must be positive"));
        }
        let expect = |m: &Matrix, rows: usize, cols: usize, name: &str| -> Result<()> {
            if m.shape() != (rows, cols) {
                return Err(invalid(format!(
                    "{name} must be {rows}x{cols}, got {}x{}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            if !m.iter().all(|v| v.is_finite()) {
                return Err(invalid(format!("{name} has non-finite entries")));
            }
            Ok(())
        };
        expect(&a, n, n, "A")?;
        expect(&b, n, p, "B")?;
        expect(&w, n, n, "W")?;
        expect(&x0, n, n, "X0")?;
        expect(&q, n, n, "Q")?;
        expect(&r, p, p, "R")?;
        for (m, name) in [(&w, "W"), (&x0, "X0")] {
            if !is_symmetric(m, SYMMETRY_TOL) || min_eigenvalue(m) < -PSD_TOL {
                return Err(invalid(format!("{name} must be symmetric positive semidefinite")));
            }
        }
        for (m, name) in [(&q, "Q"), (&r, "R")] {
            if !is_symmetric(m, SYMMETRY_TOL) || min_eigenvalue(m) <= 0.0 {
                return Err(invalid(format!("{name} must be symmetric positive definite")));
            }
        }
        Ok(Self { a, b, w, x0, q, r })
    }

    /// One-dimensional system with `X0 = W`.
    pub fn scalar(a: f64, b: f64, w: f64, q: f64, r: f64) -> Result<Self> {
        let s = |v| Matrix::from_element(1, 1, v);
        Self::new(s(a), s(b), s(w), s(w), s(q), s(r))
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn p(&self) -> usize {
        self.b.ncols()
    }

    pub fn closed_loop(&self, k: &Matrix) -> Matrix {
        &self.a + &self.b * k
    }

    pub fn open_loop_radius(&self) -> f64 {
        spectral_radius(&self.a).unwrap_or(f64::INFINITY)
    }

    /// Errors unless `ρ(A) < 1`; the safe scheme needs an open-loop stable plant.
    pub fn require_stable(&self) -> Result<()> {
        let rho = spectral_radius(&self.a)?;
        if rho >= 1.0 {
            return Err(Error::Unstable { what: "system matrix A", rho });
        }
        Ok(())
    }

    /// `A x + B u + w`.
    pub fn step(&self, x: &Vector, u: &Vector, w: &Vector) -> Result<Vector> {
        if x.len() != self.n() || u.len() != self.p() || w.len() != self.n() {
            return Err(invalid(format!(
                "step expects x, w of length {} and u of length {}; got {}, {}, {}",
                self.n(),
                self.p(),
                x.len(),
                u.len(),
                w.len()
            )));
        }
        Ok(&self.a * x + &self.b * u + w)
    }

    /// Allocation-free `out = A x + B u + w` for the simulation loops.
    pub(crate) fn step_into(&self, x: &Vector, u: &Vector, w: &Vector, out: &mut Vector) {
        out.copy_from(w);
        out.gemv(1.0, &self.a, x, 1.0);
        out.gemv(1.0, &self.b, u, 1.0);
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&SystemFile::from(self)).expect("plain numeric data")
    }

    /// Parses a system file. Missing matrices default to the identity of the
    /// right shape; the plant must be open-loop stable.
    pub fn from_json(text: &str) -> Result<Self> {
        let file: SystemFile = serde_json::from_str(text)?;
        let sys = file.into_system()?;
        sys.require_stable()?;
        Ok(sys)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}

type Rows = Vec<Vec<f64>>;

/// On-disk layout: row-major nested arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SystemFile {
    pub n: usize,
    pub p: usize,
    #[serde(rename = "A", default, skip_serializing_if = "Option::is_none")]
    pub a: Option<Rows>,
    #[serde(rename = "B", default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Rows>,
    #[serde(rename = "W", default, skip_serializing_if = "Option::is_none")]
    pub w: Option<Rows>,
    #[serde(rename = "X0", default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Rows>,
    #[serde(rename = "Q", default, skip_serializing_if = "Option::is_none")]
    pub q: Option<Rows>,
    #[serde(rename = "R", default, skip_serializing_if = "Option::is_none")]
    pub r: Option<Rows>,
}

pub fn matrix_to_rows(m: &Matrix) -> Rows {
    m.row_iter().map(|row| row.iter().cloned().collect()).collect()
}

pub fn rows_to_matrix(rows: &Rows, nrows: usize, ncols: usize, name: &str) -> Result<Matrix> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(invalid(format!("{name} must be {nrows}x{ncols}")));
    }
    Ok(Matrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

impl From<&LinearSystem> for SystemFile {
    fn from(sys: &LinearSystem) -> Self {
        Self {
            n: sys.n(),
            p: sys.p(),
            a: Some(matrix_to_rows(&sys.a)),
            b: Some(matrix_to_rows(&sys.b)),
            w: Some(matrix_to_rows(&sys.w)),
            x0: Some(matrix_to_rows(&sys.x0)),
            q: Some(matrix_to_rows(&sys.q)),
            r: Some(matrix_to_rows(&sys.r)),
        }
    }
}

impl SystemFile {
    pub fn into_system(self) -> Result<LinearSystem> {
        let (n, p) = (self.n, self.p);
        let get = |m: &Option<Rows>, rows: usize, cols: usize, name: &str| match m {
            Some(data) => rows_to_matrix(data, rows, cols, name),
            None => Ok(Matrix::identity(rows, cols)),
        };
        LinearSystem::new(
            get(&self.a, n, n, "A")?,
            get(&self.b, n, p, "B")?,
            get(&self.w, n, n, "W")?,
            get(&self.x0, n, n, "X0")?,
            get(&self.q, n, n, "Q")?,
            get(&self.r, p, p, "R")?,
        )
    }
}

/// Draws from `N(0, cov)` through a fixed square-root factor `L` (`L Lᵀ = cov`).
#[derive(Debug, Clone)]
pub struct GaussianSampler {
    factor: Matrix,
    zero: bool,
}

impl GaussianSampler {
    /// Cholesky when `cov` is positive definite, otherwise the symmetric
    /// eigen square root with eigenvalues clamped at zero.
    pub fn new(cov: &Matrix) -> Result<Self> {
        if !cov.is_square() || !cov.iter().all(|v| v.is_finite()) {
            return Err(invalid("covariance must be a finite square matrix"));
        }
        if !is_symmetric(cov, COV_TOL * (1.0 + cov.amax())) {
            return Err(invalid("covariance must be symmetric"));
        }
        let zero = cov.iter().all(|&v| v == 0.0);
        if let Some(chol) = Cholesky::new(cov.clone()) {
            return Ok(Self { factor: chol.l(), zero });
        }
        let eig = SymmetricEigen::new(cov.clone());
        if eig.eigenvalues.iter().any(|&l| l < -COV_TOL) {
            return Err(invalid("covariance is not positive semidefinite"));
        }
        let mut factor = eig.eigenvectors.clone();
        for (j, &l) in eig.eigenvalues.iter().enumerate() {
            let s = l.max(0.0).sqrt();
            factor.column_mut(j).scale_mut(s);
        }
        Ok(Self { factor, zero })
    }

    pub fn dim(&self) -> usize {
        self.factor.nrows()
    }

    pub fn factor(&self) -> &Matrix {
        &self.factor
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector {
        let mut out = Vector::zeros(self.dim());
        let mut z = Vector::zeros(self.factor.ncols());
        self.sample_into(rng, &mut z, &mut out);
        out
    }

    /// Uses `z` as scratch for the standard normal draw.
    pub(crate) fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, z: &mut Vector, out: &mut Vector) {
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        if self.zero {
            out.fill(0.0);
        } else {
            out.gemv(1.0, &self.factor, z, 0.0);
        }
    }
}

pub fn sample_gaussian<R: Rng + ?Sized>(rng: &mut R, cov: &Matrix) -> Result<Vector> {
    Ok(GaussianSampler::new(cov)?.sample(rng))
}

pub fn standard_normal_vector<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Vector {
    Vector::from_fn(len, |_, _| rng.sample(StandardNormal))
}

/// Random plant with `ρ(A) = target_rho` and identity noise and cost weights.
pub fn random_stable_system<R: Rng + ?Sized>(
    n: usize,
    p: usize,
    target_rho: f64,
    rng: &mut R,
) -> Result<LinearSystem> {
    if !(target_rho > 0.0 && target_rho < 1.0) {
        return Err(invalid(format!("target_rho must lie in (0, 1), got {target_rho}")));
    }
    if n == 0 || p == 0 {
        return Err(invalid("state and input dimensions must be positive"));
    }
    let a = loop {
        let g = Matrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let rho = spectral_radius(&g)?;
        if rho >= 1e-8 {
            break g * (target_rho / rho);
        }
    };
    let b = Matrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
    LinearSystem::new(
        a,
        b,
        Matrix::identity(n, n),
        Matrix::identity(n, n),
        Matrix::identity(n, n),
        Matrix::identity(p, p),
    )
}

/// Markov parameters `[B, AB, A²B, …]` of length `count`.
pub fn markov_parameters(a: &Matrix, b: &Matrix, count: usize) -> Vec<Matrix> {
    let mut out = Vec::with_capacity(count);
    let mut h = b.clone();
    for _ in 0..count {
        let next = a * &h;
        out.push(std::mem::replace(&mut h, next));
    }
    out
}

pub fn true_markov(sys: &LinearSystem, count: usize) -> Vec<Matrix> {
    markov_parameters(&sys.a, &sys.b, count)
}
