//! Noise-free switched system that oscillates under a one-step non-action
//! period: apply `A₀` for `t` consecutive steps whenever `‖x_k‖ ≥ M`,
//! otherwise `A₁`.

use serde::{Deserialize, Serialize};

use crate::algebra::{Matrix, Vector};
use crate::error::{invalid, Result};
use crate::system::{matrix_to_rows, rows_to_matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OscillationConfig {
    pub a0: Vec<Vec<f64>>,
    pub a1: Vec<Vec<f64>>,
    pub threshold: f64,
    pub hold: usize,
    pub x0: Vec<f64>,
    pub steps: usize,
}

impl Default for OscillationConfig {
    fn default() -> Self {
        Self {
            a0: vec![vec![0.5, 2.0], vec![0.0, 0.5]],
            a1: vec![vec![0.5, 0.0], vec![2.0, 0.5]],
            threshold: 1.0,
            hold: 1,
            x0: vec![0.1, 1.0],
            steps: 60,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Mode {
    A0,
    A1,
}

#[derive(Debug, Clone, Serialize)]
pub struct OscillationTrace {
    pub hold: usize,
    /// `x_0 … x_steps`.
    pub states: Vec<Vec<f64>>,
    /// Mode applied at each step `0 … steps−1`.
    pub modes: Vec<Mode>,
}

impl OscillationTrace {
    pub fn sup_norm(&self) -> f64 {
        self.states.iter().map(|x| norm(x)).fold(0.0, f64::max)
    }

    pub fn final_norm(&self) -> f64 {
        self.states.last().map_or(0.0, |x| norm(x))
    }

    pub fn initial_norm(&self) -> f64 {
        norm(&self.states[0])
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn oscillation_demo(cfg: &OscillationConfig) -> Result<OscillationTrace> {
    if cfg.hold == 0 {
        return Err(invalid("non-action duration must be at least 1"));
    }
    let n = cfg.x0.len();
    let a0 = rows_to_matrix(&cfg.a0, n, n, "A0")?;
    let a1 = rows_to_matrix(&cfg.a1, n, n, "A1")?;
    let mut x = Vector::from_column_slice(&cfg.x0);
    let mut states = vec![cfg.x0.clone()];
    let mut modes = Vec::with_capacity(cfg.steps);
    let mut remaining = 0;
    for _ in 0..cfg.steps {
        if remaining == 0 && x.norm() >= cfg.threshold {
            remaining = cfg.hold;
        }
        let a: &Matrix = if remaining > 0 {
            remaining -= 1;
            modes.push(Mode::A0);
            &a0
        } else {
            modes.push(Mode::A1);
            &a1
        };
        x = a * x;
        states.push(x.iter().copied().collect());
    }
    Ok(OscillationTrace {
        hold: cfg.hold,
        states,
        modes,
    })
}

impl OscillationConfig {
    pub fn with_hold(&self, hold: usize) -> Self {
        Self { hold, ..self.clone() }
    }

    pub fn from_matrices(a0: &Matrix, a1: &Matrix, threshold: f64, hold: usize, x0: &[f64], steps: usize) -> Self {
        Self {
            a0: matrix_to_rows(a0),
            a1: matrix_to_rows(a1),
            threshold,
            hold,
            x0: x0.to_vec(),
            steps,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent re-run of the switching rule written as a plain loop
    /// over the state components.
    fn brute_force(hold: usize, steps: usize) -> Vec<[f64; 2]> {
        let mut x: [f64; 2] = [0.1, 1.0];
        let mut out = vec![x];
        let mut left = 0;
        for _ in 0..steps {
            if left == 0 && (x[0] * x[0] + x[1] * x[1]).sqrt() >= 1.0 {
                left = hold;
            }
            x = if left > 0 {
                left -= 1;
                [0.5 * x[0] + 2.0 * x[1], 0.5 * x[1]]
            } else {
                [0.5 * x[0], 2.0 * x[0] + 0.5 * x[1]]
            };
            out.push(x);
        }
        out
    }

    #[test]
    fn first_step_uses_a0() {
        let tr = oscillation_demo(&OscillationConfig::default()).unwrap();
        assert_eq!(tr.modes[0], Mode::A0);
        assert!((tr.states[1][0] - 2.05).abs() < 1e-15);
        assert!((tr.states[1][1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn matches_brute_force() {
        for hold in [1, 2, 3] {
            let tr = oscillation_demo(&OscillationConfig::default().with_hold(hold)).unwrap();
            for (a, b) in tr.states.iter().zip(brute_force(hold, 60)) {
                assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_step_hold_suppresses() {
        let tr = oscillation_demo(&OscillationConfig::default().with_hold(2)).unwrap();
        assert!(tr.sup_norm() <= 3.0);
        assert!(tr.final_norm() <= 0.1);
    }

    #[test]
    fn custom_parameters_and_validation() {
        let cfg = OscillationConfig {
            threshold: 2.0,
            hold: 3,
            steps: 10,
            ..Default::default()
        };
        let tr = oscillation_demo(&cfg).unwrap();
        assert_eq!(tr.modes.len(), 10);
        assert_eq!(tr.states.len(), 11);
        assert_eq!(tr.modes[0], Mode::A1);
        assert!(oscillation_demo(&OscillationConfig::default().with_hold(0)).is_err());
    }
}
