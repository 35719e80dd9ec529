//! Online Markov-parameter inference from the cross-correlation between
//! states and past exploration draws.
//!
//! For lag `τ` the estimate at step `k` is
//!
//! ```text
//! Ĥ_{k,τ} = 1/(k−τ) · Σ_{i=τ+1..k} (i−τ)^β [x_i − Σ_{t<τ} Ĥ_{k,t} ũ_{i−t−1}] ζ_{i−τ−1}ᵀ
//! ```
//!
//! which splits into the running sums `S^{xζ}_τ` and `S^{uζ}_{τ,t}`; each is
//! updated in constant time per step, so memory and per-step work do not
//! depend on `k`.

use crate::algebra::{Matrix, Vector};
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone)]
pub struct MarkovEstimator {
    n: usize,
    p: usize,
    horizon: usize,
    beta: f64,
    k: usize,
    zetas: Vec<Vector>,
    exploits: Vec<Vector>,
    /// Slot of the most recent buffer entry.
    head: usize,
    filled: usize,
    cross: Vec<Matrix>,
    input_cross: Vec<Matrix>,
}

fn pair_index(tau: usize, t: usize) -> usize {
    tau * (tau - 1) / 2 + t
}

impl MarkovEstimator {
    /// Estimator for the first `horizon` Markov parameters (normally `n + p`).
    pub fn new(n: usize, p: usize, horizon: usize, beta: f64) -> Result<Self> {
        if n == 0 || p == 0 || horizon == 0 {
            return Err(invalid("estimator dimensions and horizon must be positive"));
        }
        if !beta.is_finite() || beta < 0.0 {
            return Err(invalid(format!("invalid decay exponent {beta}")));
        }
        let pairs = horizon * (horizon - 1) / 2;
        Ok(Self {
            n,
            p,
            horizon,
            beta,
            k: 0,
            zetas: vec![Vector::zeros(p); horizon],
            exploits: vec![Vector::zeros(p); horizon],
            head: horizon - 1,
            filled: 0,
            cross: vec![Matrix::zeros(n, p); horizon],
            input_cross: vec![Matrix::zeros(p, p); pairs],
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Index of the latest ingested state.
    pub fn step(&self) -> usize {
        self.k
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Number of summands behind the lag-`τ` estimate, `max(k − τ, 0)`.
    pub fn count(&self, tau: usize) -> usize {
        self.k.saturating_sub(tau)
    }

    pub fn buffered(&self) -> usize {
        self.filled
    }

    pub fn cross_sum(&self, tau: usize) -> &Matrix {
        &self.cross[tau]
    }

    pub fn input_cross_sum(&self, tau: usize, t: usize) -> &Matrix {
        assert!(t < tau, "input cross sums exist only for t < tau");
        &self.input_cross[pair_index(tau, t)]
    }

    /// Buffer entry `lag` steps back; lag 0 is the most recent push.
    fn back(buf: &[Vector], head: usize, lag: usize) -> &Vector {
        let m = buf.len();
        &buf[(head + m - lag) % m]
    }

    /// Ingests `x_i` together with the exploration draw `ζ_{i−1}` and the
    /// exploitation input `ũ_{i−1}` that produced it, where `i` is one past
    /// the previous step.
    pub fn ingest(&mut self, x: &Vector, zeta_prev: &Vector, exploit_prev: &Vector) -> Result<()> {
        if x.len() != self.n || zeta_prev.len() != self.p || exploit_prev.len() != self.p {
            return Err(invalid(format!(
                "ingest expects state of length {} and inputs of length {}",
                self.n, self.p
            )));
        }
        self.head = (self.head + 1) % self.horizon;
        self.zetas[self.head].copy_from(zeta_prev);
        self.exploits[self.head].copy_from(exploit_prev);
        self.filled = (self.filled + 1).min(self.horizon);
        self.k += 1;

        let i = self.k;
        for tau in 0..i.min(self.horizon) {
            let weight = ((i - tau) as f64).powf(self.beta);
            // ζ_{i−τ−1} sits τ slots back
            let zeta = Self::back(&self.zetas, self.head, tau);
            self.cross[tau].ger(weight, x, zeta, 1.0);
            for t in 0..tau {
                let exploit = Self::back(&self.exploits, self.head, t);
                self.input_cross[pair_index(tau, t)].ger(weight, exploit, zeta, 1.0);
            }
        }
        Ok(())
    }

    /// `Ĥ_{k,0}, …, Ĥ_{k,count−1}`, computed in increasing lag.
    pub fn estimate_up_to(&self, count: usize) -> Result<Vec<Matrix>> {
        if count > self.horizon {
            return Err(invalid(format!(
                "requested {count} lags but the horizon is {}",
                self.horizon
            )));
        }
        let mut out: Vec<Matrix> = Vec::with_capacity(count);
        for tau in 0..count {
            let samples = self.count(tau);
            if samples == 0 {
                return Err(Error::UnavailableEstimate { tau, k: self.k });
            }
            let mut h = self.cross[tau].clone();
            for (t, prev) in out.iter().enumerate() {
                h.gemm(-1.0, prev, &self.input_cross[pair_index(tau, t)], 1.0);
            }
            h /= samples as f64;
            out.push(h);
        }
        Ok(out)
    }

    pub fn estimate_all(&self) -> Result<Vec<Matrix>> {
        self.estimate_up_to(self.horizon)
    }
}

/// Full closed-loop record used by the brute-force estimator.
///
/// `states[i] = x_i` for `i = 0..=k`; `zetas[i]` and `exploits[i]` are the
/// exploration draw and exploitation input applied at step `i < k`.
#[derive(Debug, Clone, Default)]
pub struct History {
    pub states: Vec<Vector>,
    pub zetas: Vec<Vector>,
    pub exploits: Vec<Vector>,
}

impl History {
    pub fn last_step(&self) -> usize {
        self.states.len().saturating_sub(1)
    }
}

/// Literal evaluation of the estimator formula for lags `0..count`,
/// recomputing each lower-lag estimate from its own nested sum.
pub fn direct_estimates(history: &History, count: usize, beta: f64) -> Result<Vec<Matrix>> {
    let k = history.last_step();
    if history.zetas.len() < k || history.exploits.len() < k {
        return Err(invalid("history is missing inputs"));
    }
    let n = history.states.first().map_or(0, |x| x.len());
    let p = history.zetas.first().map_or(0, |z| z.len());
    let mut out: Vec<Matrix> = Vec::with_capacity(count);
    for tau in 0..count {
        if k < tau + 1 {
            return Err(Error::UnavailableEstimate { tau, k });
        }
        let mut acc = Matrix::zeros(n, p);
        for i in (tau + 1)..=k {
            let mut residual = history.states[i].clone();
            for (t, h) in out.iter().enumerate() {
                residual -= h * &history.exploits[i - t - 1];
            }
            let weight = ((i - tau) as f64).powf(beta);
            acc += weight * residual * history.zetas[i - tau - 1].transpose();
        }
        out.push(acc / (k - tau) as f64);
    }
    Ok(out)
}

pub fn direct_estimate(history: &History, tau: usize, beta: f64) -> Result<Matrix> {
    let mut all = direct_estimates(history, tau + 1, beta)?;
    Ok(all.pop().expect("tau + 1 estimates"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::ExplorationRate;
    use crate::rng::rng_from;
    use crate::system::{random_stable_system, standard_normal_vector, GaussianSampler};
    use proptest::prelude::*;
    use rand::Rng;

    /// Closed-loop run under `u = K x + (i+1)^{-β} ζ`, with the feedback
    /// randomly withheld and always withheld for large states.
    fn random_history(n: usize, p: usize, steps: usize, beta: f64, seed: u64) -> History {
        let mut rng = rng_from(seed);
        let sys = random_stable_system(n, p, 0.8, &mut rng).unwrap();
        let gain = Matrix::from_fn(p, n, |_, _| 0.2 * rng.random_range(-1.0..1.0));
        let noise = GaussianSampler::new(&sys.w).unwrap();
        let rate = ExplorationRate::sweep(beta).unwrap();
        let mut h = History {
            states: vec![noise.sample(&mut rng)],
            ..Default::default()
        };
        for i in 0..steps {
            let x = h.states[i].clone();
            let exploit = if rng.random_bool(0.7) && x.norm() < 5.0 { &gain * &x } else { Vector::zeros(p) };
            let zeta = standard_normal_vector(&mut rng, p);
            let u = &exploit + &zeta * rate.scale(i);
            let w = noise.sample(&mut rng);
            h.states.push(sys.step(&x, &u, &w).unwrap());
            h.zetas.push(zeta);
            h.exploits.push(exploit);
        }
        h
    }

    fn feed(est: &mut MarkovEstimator, h: &History) {
        for i in 1..h.states.len() {
            est.ingest(&h.states[i], &h.zetas[i - 1], &h.exploits[i - 1]).unwrap();
        }
    }

    #[test]
    fn first_ingest_updates_only_lag_zero() {
        let mut est = MarkovEstimator::new(2, 1, 3, 0.25).unwrap();
        let x1 = Vector::from_vec(vec![1.5, -2.0]);
        let z0 = Vector::from_vec(vec![0.7]);
        est.ingest(&x1, &z0, &Vector::zeros(1)).unwrap();
        assert_eq!(est.cross_sum(0), &(&x1 * z0.transpose()));
        assert_eq!(est.cross_sum(1), &Matrix::zeros(2, 1));
        assert_eq!(est.count(0), 1);
        assert_eq!(est.count(1), 0);
        assert!(matches!(
            est.estimate_all(),
            Err(Error::UnavailableEstimate { tau: 1, k: 1 })
        ));
    }

    #[test]
    fn zero_data_gives_zero_estimates() {
        let mut est = MarkovEstimator::new(2, 2, 4, 0.25).unwrap();
        for _ in 0..10 {
            est.ingest(&Vector::zeros(2), &Vector::zeros(2), &Vector::zeros(2)).unwrap();
        }
        for h in est.estimate_all().unwrap() {
            assert_eq!(h, Matrix::zeros(2, 2));
        }
        assert!(est.ingest(&Vector::zeros(3), &Vector::zeros(2), &Vector::zeros(2)).is_err());
    }

    #[test]
    fn impulse_recovers_first_column_of_b() {
        // A = 0, W = 0, x0 = 0, ζ0 = e1: x1 = B e1
        let b = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let e1 = Vector::from_vec(vec![1.0, 0.0]);
        let x1 = &b * &e1;
        let mut est = MarkovEstimator::new(2, 2, 4, 0.25).unwrap();
        est.ingest(&x1, &e1, &Vector::zeros(2)).unwrap();
        let h = est.estimate_up_to(1).unwrap();
        let expected = Matrix::from_row_slice(2, 2, &[1.0, 0.0, 3.0, 0.0]);
        assert_eq!(h[0], expected);

        let hist = History {
            states: vec![Vector::zeros(2), x1],
            zetas: vec![e1],
            exploits: vec![Vector::zeros(2)],
        };
        assert_eq!(direct_estimate(&hist, 0, 0.25).unwrap(), expected);
    }

    #[test]
    fn no_feedback_means_no_correction() {
        let mut h = random_history(2, 1, 50, 0.25, 3);
        for u in h.exploits.iter_mut() {
            u.fill(0.0);
        }
        let direct = direct_estimate(&h, 2, 0.25).unwrap();
        let k = h.last_step();
        let mut plain = Matrix::zeros(2, 1);
        for i in 3..=k {
            plain += ((i - 2) as f64).powf(0.25) * &h.states[i] * h.zetas[i - 3].transpose();
        }
        plain /= (k - 2) as f64;
        assert!((direct - plain).amax() < 1e-12);
    }

    #[test]
    fn sums_match_direct_summation_after_long_run() {
        let h = random_history(3, 2, 2000, 0.25, 7);
        let mut est = MarkovEstimator::new(3, 2, 5, 0.25).unwrap();
        feed(&mut est, &h);
        let k = h.last_step();
        for tau in 0..5 {
            let mut direct = Matrix::zeros(3, 2);
            for i in (tau + 1)..=k {
                direct += ((i - tau) as f64).powf(0.25) * &h.states[i] * h.zetas[i - tau - 1].transpose();
            }
            let rel = (est.cross_sum(tau) - &direct).amax() / direct.amax();
            assert!(rel < 1e-10);
            for t in 0..tau {
                let mut d = Matrix::zeros(2, 2);
                for i in (tau + 1)..=k {
                    d += ((i - tau) as f64).powf(0.25) * &h.exploits[i - t - 1] * h.zetas[i - tau - 1].transpose();
                }
                assert!((est.input_cross_sum(tau, t) - &d).amax() / d.amax() < 1e-10);
            }
        }
        assert_eq!(est.buffered(), 5);
    }

    #[test]
    fn recursive_matches_direct_on_long_run() {
        let h = random_history(3, 2, 2000, 0.25, 11);
        let mut est = MarkovEstimator::new(3, 2, 5, 0.25).unwrap();
        feed(&mut est, &h);
        let rec = est.estimate_all().unwrap();
        let dir = direct_estimates(&h, 5, 0.25).unwrap();
        for (a, b) in rec.iter().zip(&dir) {
            assert!((a - b).amax() <= 1e-9);
        }
    }

    #[test]
    fn unbiased_at_fixed_small_horizon() {
        let mut rng = rng_from(99);
        let sys = random_stable_system(2, 1, 0.7, &mut rng).unwrap();
        let gain = Matrix::from_row_slice(1, 2, &[-0.2, 0.1]);
        let noise = GaussianSampler::new(&sys.w).unwrap();
        let rate = ExplorationRate::new(0.25).unwrap();
        let reps = 2000;
        let mut samples = Vec::with_capacity(reps);
        for _ in 0..reps {
            let mut est = MarkovEstimator::new(2, 1, 3, 0.25).unwrap();
            let mut x = noise.sample(&mut rng);
            for i in 0..20 {
                let exploit = &gain * &x;
                let zeta = standard_normal_vector(&mut rng, 1);
                let u = &exploit + &zeta * rate.scale(i);
                x = sys.step(&x, &u, &noise.sample(&mut rng)).unwrap();
                est.ingest(&x, &zeta, &exploit).unwrap();
            }
            samples.push(est.estimate_up_to(1).unwrap().remove(0));
        }
        for r in 0..2 {
            let vals: Vec<f64> = samples.iter().map(|m| m[(r, 0)]).collect();
            let mean = vals.iter().sum::<f64>() / reps as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
            let se = (var / reps as f64).sqrt();
            assert!((mean - sys.b[(r, 0)]).abs() <= 4.0 * se, "entry {r}: {mean} vs {}", sys.b[(r, 0)]);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn recursive_equals_direct(
            n in 1usize..5,
            p in 1usize..4,
            steps in 10usize..3000,
            beta in 0.0f64..0.5,
            seed in any::<u64>(),
        ) {
            let h = random_history(n, p, steps, beta, seed);
            let m = n + p;
            let mut est = MarkovEstimator::new(n, p, m, beta).unwrap();
            feed(&mut est, &h);
            let rec = est.estimate_all().unwrap();
            let dir = direct_estimates(&h, m, beta).unwrap();
            for (a, b) in rec.iter().zip(&dir) {
                prop_assert!((a - b).amax() <= 1e-9);
            }
        }
    }
}
