//! Lyapunov certificates and the closed-form appendix bounds for switched
//! linear systems: escape probability, fourth moment and switching gap.

use nalgebra::Cholesky;
use serde::Serialize;

use crate::algebra::{max_eigenvalue, min_eigenvalue, solve_dlyap, spectral_norm, spectral_radius, symmetrize, Matrix};
use crate::error::{invalid, Error, Result};
use crate::system::LinearSystem;
use crate::trajectory::serialize_rows;

/// Lower clamp on ρ used by every bound.
pub const RHO_FLOOR: f64 = 0.26;

/// Slack allowed when checking `AᵀPA ≼ ρP`.
pub const CONTRACTION_SLACK: f64 = 1e-10;

/// Terms of `Σ_s ‖(A+BK)^s‖` below this are dropped.
pub const SERIES_TOLERANCE: f64 = 1e-14;
pub const SERIES_MAX_TERMS: usize = 100_000;

/// A pair `(P, ρ)` with `P ≻ 0` and `AᵀPA ≼ ρP`.
#[derive(Debug, Clone, Serialize)]
pub struct LyapunovCertificate {
    #[serde(serialize_with = "serialize_rows")]
    pub p: Matrix,
    pub rho: f64,
}

/// `λ_max(P^{−1/2} AᵀPA P^{−1/2})`, the smallest ρ certified by `P` for `A`.
pub fn contraction(a: &Matrix, p: &Matrix) -> Result<f64> {
    let chol = Cholesky::new(p.clone()).ok_or_else(|| invalid("certificate matrix is not positive definite"))?;
    let l = chol.l();
    let linv = l
        .clone()
        .try_inverse()
        .ok_or_else(|| invalid("certificate matrix is singular"))?;
    let m = &linv * a.transpose() * p * a * linv.transpose();
    Ok(max_eigenvalue(&symmetrize(&m)))
}

impl LyapunovCertificate {
    /// `P` solving `AᵀPA − P + I = 0` and `ρ = 1 − 1/λ_max(P)`.
    pub fn for_matrix(a: &Matrix) -> Result<Self> {
        let n = a.nrows();
        let p = solve_dlyap(a, &Matrix::identity(n, n))?;
        let rho = (1.0 - 1.0 / max_eigenvalue(&p)).max(0.0);
        Ok(Self { p, rho })
    }

    /// A single certificate for two matrices, taken as the best of the
    /// candidates `P_A`, `P_B` and `P_A + P_B`.
    pub fn common(a: &Matrix, b: &Matrix) -> Result<Self> {
        let pa = Self::for_matrix(a)?.p;
        let pb = Self::for_matrix(b)?.p;
        let sum = &pa + &pb;
        let mut best: Option<Self> = None;
        for p in [pa, pb, sum] {
            let rho = contraction(a, &p)?.max(contraction(b, &p)?).max(0.0);
            if rho < 1.0 && best.as_ref().is_none_or(|c| rho < c.rho) {
                best = Some(Self { p, rho });
            }
        }
        best.ok_or_else(|| Error::CertificateUnavailable("no common Lyapunov certificate among the candidates".into()))
    }

    pub fn kappa(&self) -> f64 {
        spectral_norm(&self.p) / min_eigenvalue(&self.p)
    }

    pub fn certifies(&self, a: &Matrix) -> Result<bool> {
        Ok(contraction(a, &self.p)? <= self.rho + CONTRACTION_SLACK)
    }
}

/// `𝒲 = ‖S‖` with `ASAᵀ − S + W = 0`, i.e. `‖W + AWAᵀ + A²WA²ᵀ + …‖`.
pub fn noise_accumulation(a: &Matrix, w: &Matrix) -> Result<f64> {
    let s = solve_dlyap(&a.transpose(), w)?;
    Ok(spectral_norm(&s))
}

/// Constants shared by the switched-system bounds.
#[derive(Debug, Clone, Serialize)]
pub struct BoundCertificate {
    pub certificate: LyapunovCertificate,
    /// `max(ρ, 0.26)`.
    pub rho: f64,
    pub kappa: f64,
    /// Accumulated noise norm 𝒲.
    pub noise: f64,
    /// `𝒜 = ‖A‖ + ‖B‖M`.
    pub dynamics: f64,
    pub a_norm: f64,
    pub b_norm: f64,
    pub threshold: f64,
    pub hold: usize,
    pub n: usize,
    pub c: f64,
}

impl BoundCertificate {
    pub fn from_parts(
        certificate: LyapunovCertificate,
        noise: f64,
        a_norm: f64,
        b_norm: f64,
        threshold: f64,
        hold: usize,
    ) -> Result<Self> {
        if !(certificate.rho < 1.0) || certificate.rho < 0.0 {
            return Err(invalid(format!("contraction factor {} outside [0, 1)", certificate.rho)));
        }
        if !(threshold > 0.0) || hold == 0 || !(noise >= 0.0) {
            return Err(invalid("threshold and hold must be positive, noise nonnegative"));
        }
        let rho = certificate.rho.max(RHO_FLOOR);
        let kappa = certificate.kappa();
        let c = (1.0 - rho.powf(0.25)).powi(2) / (4.0 * noise * kappa);
        Ok(Self {
            n: certificate.p.nrows(),
            certificate,
            rho,
            kappa,
            noise,
            dynamics: a_norm + b_norm * threshold,
            a_norm,
            b_norm,
            threshold,
            hold,
            c,
        })
    }

    /// Certificate for the open-loop dynamics of `sys`.
    pub fn open_loop(sys: &LinearSystem, threshold: f64, hold: usize) -> Result<Self> {
        let cert = LyapunovCertificate::for_matrix(&sys.a)?;
        let noise = noise_accumulation(&sys.a, &sys.w)?;
        Self::from_parts(cert, noise, spectral_norm(&sys.a), spectral_norm(&sys.b), threshold, hold)
    }

    /// Common certificate for `A` and `A + BK`, with 𝒲 the larger of the
    /// two accumulated-noise norms.
    pub fn switching(sys: &LinearSystem, k: &Matrix, threshold: f64, hold: usize) -> Result<Self> {
        let closed = sys.closed_loop(k);
        let rho_cl = spectral_radius(&closed)?;
        if rho_cl >= 1.0 {
            return Err(Error::CertificateUnavailable(format!(
                "closed loop is unstable (spectral radius {rho_cl:.6})"
            )));
        }
        let cert = LyapunovCertificate::common(&sys.a, &closed)?;
        let noise = noise_accumulation(&sys.a, &sys.w)?.max(noise_accumulation(&closed, &sys.w)?);
        Self::from_parts(cert, noise, spectral_norm(&sys.a), spectral_norm(&sys.b), threshold, hold)
    }

    pub fn with_threshold(&self, threshold: f64) -> Result<Self> {
        Self::from_parts(self.certificate.clone(), self.noise, self.a_norm, self.b_norm, threshold, self.hold)
    }

    pub fn with_hold(&self, hold: usize) -> Result<Self> {
        Self::from_parts(self.certificate.clone(), self.noise, self.a_norm, self.b_norm, self.threshold, hold)
    }

    /// Smallest threshold `√(3𝒲κ)/(1 − ρ^{1/4})` for which the escape bound holds.
    pub fn escape_floor(&self) -> f64 {
        (3.0 * self.noise * self.kappa).sqrt() / (1.0 - self.rho.powf(0.25))
    }

    /// `ℰ = exp(−cM²)`.
    pub fn tail(&self) -> f64 {
        (-self.c * self.threshold * self.threshold).exp()
    }

    fn prefactor(&self, extra: f64) -> f64 {
        2f64.powf(self.n as f64 / 2.0 + extra) / (self.rho.powf(-0.5) - 1.0)
    }

    /// 𝒬 of the fourth-moment lemma.
    pub fn q_term(&self) -> f64 {
        let (rho, w, a2) = (self.rho, self.noise, self.dynamics * self.dynamics);
        let m2 = self.threshold * self.threshold;
        let p2 = spectral_norm(&self.certificate.p).powi(2);
        let drive = m2 * a2 + w;
        drive * p2 / ((1.0 - rho) * (1.0 - rho * rho)) * ((1.0 + rho) * drive + 4.0 * a2 * w * self.kappa)
    }
}

/// Bound on `P(‖x_k‖ ≥ M)`:
/// `2^{n/2+1}/(ρ^{−1/2} − 1) · exp(−(1 − ρ^{1/4})²M²/(4𝒲κ))`.
pub fn escape_bound(cert: &BoundCertificate) -> Result<f64> {
    let floor = cert.escape_floor();
    if cert.threshold < floor {
        return Err(Error::Validity(format!(
            "threshold M = {} is below the escape-bound floor {floor:.4}",
            cert.threshold
        )));
    }
    Ok(cert.prefactor(1.0) * cert.tail())
}

/// Bound `8[𝒬 + 𝒲²κ²]` on `E‖x_k‖⁴`.
pub fn fourth_moment_bound(cert: &BoundCertificate) -> f64 {
    8.0 * (cert.q_term() + (cert.noise * cert.kappa).powi(2))
}

/// The constants of the switching-gap bound.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SwitchingGapTerms {
    pub c1: f64,
    pub c2: f64,
    pub g: f64,
    pub tail: f64,
    pub bound: f64,
}

fn power_series_norm(m: &Matrix) -> f64 {
    let mut power = Matrix::identity(m.nrows(), m.ncols());
    let mut sum = 0.0;
    for _ in 0..SERIES_MAX_TERMS {
        let term = spectral_norm(&power);
        sum += term;
        if term < SERIES_TOLERANCE {
            break;
        }
        power = &power * m;
    }
    sum
}

/// `2𝒞₁𝒢 + 𝒢²`, bounding the cost excess of the switching policy with
/// gain `K`, threshold `M` and non-action length `t` over `u = Kx`.
pub fn switching_gap_bound(cert: &BoundCertificate, sys: &LinearSystem, k: &Matrix) -> Result<SwitchingGapTerms> {
    let closed = sys.closed_loop(k);
    let rho_cl = spectral_radius(&closed)?;
    if rho_cl >= 1.0 {
        return Err(Error::Unstable { what: "closed loop", rho: rho_cl });
    }
    let gain_norm = spectral_norm(k);
    if gain_norm > cert.threshold {
        return Err(Error::Validity(format!(
            "gain norm {gain_norm:.4} exceeds the threshold {}",
            cert.threshold
        )));
    }
    for (m, what) in [(&sys.a, "open loop"), (&closed, "closed loop")] {
        if !cert.certificate.certifies(m)? {
            return Err(Error::CertificateUnavailable(format!("certificate does not contract the {what}")));
        }
    }
    let weight = spectral_norm(&(&sys.q + k.transpose() * &sys.r * k));
    let c1 = (cert.noise * cert.kappa * weight / (1.0 - cert.rho)).sqrt();
    let c2 = weight * spectral_norm(&(&sys.b * k)) * power_series_norm(&closed) * cert.prefactor(1.75);
    let tail = cert.tail();
    let moment = cert.q_term() + (cert.noise * cert.kappa).powi(2);
    let g = c2 * cert.hold as f64 * moment.powf(0.25) * tail;
    Ok(SwitchingGapTerms {
        c1,
        c2,
        g,
        tail,
        bound: 2.0 * c1 * g + g * g,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use crate::system::random_stable_system;
    use approx::assert_abs_diff_eq;

    fn scalar(v: f64) -> Matrix {
        Matrix::from_element(1, 1, v)
    }

    #[test]
    fn certificate_examples() {
        let c = LyapunovCertificate::for_matrix(&Matrix::zeros(2, 2)).unwrap();
        assert_eq!(c.p, Matrix::identity(2, 2));
        assert_eq!(c.rho, 0.0);

        let c = LyapunovCertificate::for_matrix(&scalar(0.5)).unwrap();
        assert_abs_diff_eq!(c.p[(0, 0)], 4.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.rho, 0.25, epsilon = 1e-12);

        assert!(LyapunovCertificate::for_matrix(&scalar(1.1)).is_err());
    }

    #[test]
    fn certificates_contract_random_matrices() {
        let mut rng = rng_from(1);
        for _ in 0..50 {
            let sys = random_stable_system(4, 1, 0.95, &mut rng).unwrap();
            let c = LyapunovCertificate::for_matrix(&sys.a).unwrap();
            assert!(contraction(&sys.a, &c.p).unwrap() <= c.rho + CONTRACTION_SLACK);
            assert!(c.kappa() >= 1.0);
        }
    }

    #[test]
    fn noise_accumulation_examples() {
        assert_abs_diff_eq!(noise_accumulation(&Matrix::zeros(2, 2), &Matrix::identity(2, 2)).unwrap(), 1.0);
        assert_abs_diff_eq!(noise_accumulation(&scalar(0.5), &scalar(1.0)).unwrap(), 4.0 / 3.0, epsilon = 1e-12);
        assert_eq!(noise_accumulation(&scalar(0.5), &scalar(0.0)).unwrap(), 0.0);
    }

    fn golden_cert(m: f64) -> BoundCertificate {
        let cert = LyapunovCertificate {
            p: Matrix::identity(2, 2),
            rho: 0.25,
        };
        BoundCertificate::from_parts(cert, 4.0 / 3.0, 0.5, 1.0, m, 1).unwrap()
    }

    #[test]
    fn escape_plug_in() {
        let floor = golden_cert(1.0).escape_floor();
        let cert = golden_cert(floor);
        assert_eq!(cert.rho, 0.26);
        let q = 0.26f64.powf(0.25);
        let expected = 4.0 / (0.26f64.powf(-0.5) - 1.0) * (-(1.0 - q).powi(2) * floor * floor / (4.0 * 4.0 / 3.0)).exp();
        let got = escape_bound(&cert).unwrap();
        assert_abs_diff_eq!(got, expected, epsilon = 1e-12);
        // at the floor the exponent is exactly −3/4
        assert_abs_diff_eq!(got, 4.0 / (0.26f64.powf(-0.5) - 1.0) * (-0.75f64).exp(), epsilon = 1e-12);
        assert!(escape_bound(&golden_cert(2.0 * floor)).unwrap() < got);
        assert!(matches!(escape_bound(&golden_cert(0.5 * floor)), Err(Error::Validity(_))));
    }

    #[test]
    fn fourth_moment_increases_with_threshold() {
        let values: Vec<f64> = [1.0, 2.0, 4.0, 8.0].iter().map(|&m| fourth_moment_bound(&golden_cert(m))).collect();
        assert!(values.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn switching_gap_shape() {
        let sys = LinearSystem::new(
            Matrix::from_row_slice(2, 2, &[0.6, 0.2, 0.0, 0.5]),
            Matrix::from_row_slice(2, 1, &[1.0, 0.5]),
            Matrix::identity(2, 2) * 0.25,
            Matrix::identity(2, 2) * 0.25,
            Matrix::identity(2, 2),
            Matrix::identity(1, 1),
        )
        .unwrap();
        let k = crate::algebra::solve_dare(&sys.a, &sys.b, &sys.q, &sys.r).unwrap().k;
        let base = BoundCertificate::switching(&sys, &k, 6.0, 3).unwrap();
        let at = |m: f64| switching_gap_bound(&base.with_threshold(m).unwrap(), &sys, &k).unwrap();
        let (b1, b2, b4) = (at(6.0).bound, at(12.0).bound, at(24.0).bound);
        assert!(b1 > b2 && b2 > b4);
        let g1 = switching_gap_bound(&base, &sys, &k).unwrap();
        let g2 = switching_gap_bound(&base.with_hold(6).unwrap(), &sys, &k).unwrap();
        assert_abs_diff_eq!(g2.g, 2.0 * g1.g, epsilon = 1e-12 * g1.g.max(1e-300));
        assert!(switching_gap_bound(&base.with_threshold(0.01).unwrap(), &sys, &k).is_err());
    }
}
