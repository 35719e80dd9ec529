//! System reconstruction from Markov parameters via virtual rollouts.
//!
//! The estimated impulse response drives `N` virtual zero-initial-state
//! trajectories under random probe inputs. Stacking them gives the
//! regression `X₁ʰ = A X₀ʰ + B Uʰ`, solved by a pseudo-inverse.

use rand::Rng;

use crate::algebra::{pseudo_inverse, Matrix};
use crate::error::{invalid, Error, Result};
use crate::policy::draw_zeta;

/// Number of probe draws attempted before giving up on the rank check.
pub const PROBE_ATTEMPTS: usize = 5;

/// Relative singular-value floor for the rank check.
pub const RANK_TOLERANCE: f64 = 1e-8;

/// Default number of virtual trajectories.
pub const DEFAULT_PROBES: usize = 50;

/// Block lower-triangular Toeplitz matrix of `m` Markov parameters: block
/// `(i, j)` is `H_{i−j}` for `j ≤ i` and zero otherwise.
pub fn block_toeplitz(h: &[Matrix]) -> Result<Matrix> {
    let m = h.len();
    if m == 0 {
        return Err(invalid("block Toeplitz matrix needs at least one block"));
    }
    let (n, p) = h[0].shape();
    if h.iter().any(|b| b.shape() != (n, p)) {
        return Err(invalid("Markov parameters have inconsistent shapes"));
    }
    let mut t = Matrix::zeros(n * m, p * m);
    for i in 0..m {
        for j in 0..=i {
            t.view_mut((i * n, j * p), (n, p)).copy_from(&h[i - j]);
        }
    }
    Ok(t)
}

/// Probe inputs for the virtual trajectories, stored as `U^v` with block
/// row `i` holding `u_i` of every trajectory.
#[derive(Debug, Clone)]
pub struct ProbeBattery {
    pub n_probes: usize,
    pub horizon: usize,
    pub stacked: Matrix,
}

impl ProbeBattery {
    pub fn draw<R: Rng + ?Sized>(p: usize, horizon: usize, n_probes: usize, rng: &mut R) -> Self {
        let mut stacked = Matrix::zeros(p * horizon, n_probes);
        for j in 0..n_probes {
            stacked.set_column(j, &draw_zeta(rng, p * horizon));
        }
        Self {
            n_probes,
            horizon,
            stacked,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.stacked.nrows() / self.horizon
    }

    /// `U^h`: the inputs `u_0 … u_{m−1}` of every trajectory side by side.
    pub fn horizontal(&self) -> Matrix {
        let p = self.input_dim();
        let m = self.horizon;
        let mut out = Matrix::zeros(p, self.n_probes * m);
        for j in 0..self.n_probes {
            for i in 0..m {
                out.set_column(j * m + i, &self.stacked.view((i * p, j), (p, 1)).column(0));
            }
        }
        out
    }
}

/// Virtual-rollout regression data.
#[derive(Debug, Clone)]
pub struct Regression {
    /// `[x̃_1 … x̃_m]` per trajectory.
    pub next: Matrix,
    /// `[Uʰ; X₀ʰ]` with `X₀ʰ = [0, x̃_1 … x̃_{m−1}]` per trajectory.
    pub regressor: Matrix,
}

pub fn regression(toeplitz: &Matrix, probes: &ProbeBattery, n: usize) -> Regression {
    let p = probes.input_dim();
    let m = probes.horizon;
    let responses = toeplitz * &probes.stacked;
    let cols = probes.n_probes * m;
    let mut next = Matrix::zeros(n, cols);
    let mut regressor = Matrix::zeros(p + n, cols);
    regressor.rows_mut(0, p).copy_from(&probes.horizontal());
    for j in 0..probes.n_probes {
        for i in 0..m {
            let x = responses.view((i * n, j), (n, 1));
            next.view_mut((0, j * m + i), (n, 1)).copy_from(&x);
            if i + 1 < m {
                regressor.view_mut((p, j * m + i + 1), (n, 1)).copy_from(&x);
            }
        }
    }
    Regression { next, regressor }
}

fn full_row_rank(m: &Matrix) -> bool {
    let sv = m.clone().singular_values();
    let max = sv.max();
    max > 0.0 && sv.min() > RANK_TOLERANCE * max && sv.len() == m.nrows()
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub a: Matrix,
    pub b: Matrix,
    /// Whether `[Uʰ; X₀ʰ]` had full row rank.
    pub full_rank: bool,
    pub attempts: usize,
}

/// Reconstructs `(Â, B̂)` from `n + p` Markov parameters using `n_probes`
/// virtual trajectories.
///
/// Probes are redrawn up to [`PROBE_ATTEMPTS`] times while the regressor is
/// rank deficient. If the deficiency persists because the Markov data
/// itself is degenerate, the minimum-norm solution is returned with
/// `full_rank = false`; probes that are themselves rank deficient raise
/// [`Error::DegenerateProbes`].
pub fn reconstruct<R: Rng + ?Sized>(h: &[Matrix], n_probes: usize, rng: &mut R) -> Result<Reconstruction> {
    let toeplitz = block_toeplitz(h)?;
    let (n, p) = h[0].shape();
    let m = h.len();
    if m < n + p {
        return Err(invalid(format!("reconstruction needs n + p = {} Markov parameters, got {m}", n + p)));
    }
    if n_probes == 0 {
        return Err(invalid("at least one probe trajectory is required"));
    }
    let mut last = None;
    for attempt in 1..=PROBE_ATTEMPTS {
        let probes = ProbeBattery::draw(p, m, n_probes, rng);
        if !full_row_rank(&probes.horizontal()) {
            continue;
        }
        let reg = regression(&toeplitz, &probes, n);
        let full_rank = full_row_rank(&reg.regressor);
        last = Some((reg, attempt, full_rank));
        if full_rank {
            break;
        }
    }
    let (reg, attempts, full_rank) = last.ok_or(Error::DegenerateProbes {
        attempts: PROBE_ATTEMPTS,
    })?;
    let ba = &reg.next * pseudo_inverse(&reg.regressor);
    Ok(Reconstruction {
        b: ba.columns(0, p).into_owned(),
        a: ba.columns(p, n).into_owned(),
        full_rank,
        attempts,
    })
}
