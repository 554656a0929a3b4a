//! Covariance predictions for `θ̃_{n+1} = θ̃_n + (g/(n+1)) [A θ̃_n + Δ_{n+1}]`.
//!
//! - `½I + gA` Hurwitz: `Cov(θ_n) = Σ_θ/n + O(n^{-1-δ})` with
//!   `[½I+gA]Σ + Σ[½I+gA]ᵀ + g²Σ_Δ = 0`.
//! - `I + gA` Hurwitz as well: the `n⁻²` coefficient `Σ_{θ,2}` is available.
//! - otherwise the mean-square error decays at `n^{-2ρ₀}` along the leading
//!   left eigenvector `v`, `ρ₀ = −max Re λ(gA)`.

use nalgebra::{Complex, DMatrix, DVector};
use serde::Serialize;

use crate::linalg::{self, HURWITZ_TOL};
use crate::poisson::{ser_matrix, NoiseStats};
use crate::{Error, Result};

/// Vectorized systems with condition number above this carry a warning.
pub const CONDITION_WARN: f64 = 1e12;
/// Default relative threshold for `Σ_Δ v ≠ 0`.
pub const SIGMA_V_REL_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditioningWarning {
    pub condition_number: f64,
}

#[derive(Debug, Clone)]
pub struct LyapunovSolution {
    pub sigma: DMatrix<f64>,
    /// `‖MΣ + ΣMᵀ + Q‖_F`.
    pub residual: f64,
    pub warning: Option<ConditioningWarning>,
}

pub fn lyapunov_residual(m: &DMatrix<f64>, q: &DMatrix<f64>, sigma: &DMatrix<f64>) -> f64 {
    (m * sigma + sigma * m.transpose() + q).norm()
}

/// Solve `MΣ + ΣMᵀ + Q = 0` through `(I ⊗ M + M ⊗ I) vec Σ = −vec Q`.
pub fn solve_lyapunov(m: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<LyapunovSolution> {
    let d = m.nrows();
    if m.ncols() != d || q.shape() != (d, d) {
        return Err(Error::Dimension(format!(
            "Lyapunov: M is {:?}, Q is {:?}",
            m.shape(),
            q.shape()
        )));
    }
    if !linalg::is_hurwitz(m) {
        return Err(Error::Stability(format!(
            "Lyapunov matrix is not Hurwitz (spectral abscissa {})",
            linalg::spectral_abscissa(m)
        )));
    }
    let eye = DMatrix::<f64>::identity(d, d);
    let kron = eye.kronecker(m) + m.kronecker(&eye);
    let rhs = DVector::from_column_slice(q.as_slice()) * -1.0;
    let cond = linalg::condition_number(&kron);
    let vec = linalg::solve_vec(&kron, &rhs, "vectorized Lyapunov system")?;
    let sigma = linalg::symmetrize(&DMatrix::from_column_slice(d, d, vec.as_slice()));
    let residual = lyapunov_residual(m, q, &sigma);
    Ok(LyapunovSolution {
        sigma,
        residual,
        warning: (cond > CONDITION_WARN).then_some(ConditioningWarning {
            condition_number: cond,
        }),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct EigenReport {
    /// `(re, im)` pairs.
    pub eigenvalues: Vec<(f64, f64)>,
    pub rho0: f64,
    pub leading_eigenvalue: (f64, f64),
    /// Left eigenvector for the leading eigenvalue as `(re, im)` pairs:
    /// unit norm, largest-modulus entry real positive.
    pub leading_left_eigenvector: Vec<(f64, f64)>,
    /// `½I + A` Hurwitz.
    pub half_condition: bool,
    /// `I + A` Hurwitz.
    pub one_condition: bool,
    pub sigma_v_nonzero: bool,
}

impl EigenReport {
    pub fn left_vector(&self) -> DVector<Complex<f64>> {
        DVector::from_iterator(
            self.leading_left_eigenvector.len(),
            self.leading_left_eigenvector.iter().map(|&(re, im)| Complex::new(re, im)),
        )
    }

    /// `E|vᵀθ̃|² = vᵀ M v̄` for a real symmetric second-moment matrix `M`.
    pub fn projected_moment(&self, second_moment: &DMatrix<f64>) -> f64 {
        let v = self.left_vector();
        let mc = second_moment.map(|x| Complex::new(x, 0.0));
        let conj = v.map(|c| c.conj());
        (v.transpose() * mc * conj)[(0, 0)].re
    }

    /// Mean-square decay exponent: 1 on the optimal branch, `2ρ₀` otherwise.
    pub fn rate_exponent(&self) -> f64 {
        if self.half_condition {
            1.0
        } else {
            2.0 * self.rho0
        }
    }
}

/// Eigen-structure of `A` with the default `Σ_Δ v` threshold.
pub fn eigen_report(a: &DMatrix<f64>, sigma_delta: &DMatrix<f64>) -> Result<EigenReport> {
    eigen_report_with(a, sigma_delta, SIGMA_V_REL_TOL)
}

pub fn eigen_report_with(a: &DMatrix<f64>, sigma_delta: &DMatrix<f64>, sigma_v_rel_tol: f64) -> Result<EigenReport> {
    let d = a.nrows();
    if a.ncols() != d || d == 0 {
        return Err(Error::Dimension(format!("A must be square, got {:?}", a.shape())));
    }
    if sigma_delta.shape() != (d, d) {
        return Err(Error::Dimension(format!(
            "Σ_Δ is {:?}, A is {d}x{d}",
            sigma_delta.shape()
        )));
    }
    let eig = linalg::eigenvalues(a);
    let max_re = eig.iter().map(|l| l.re).fold(f64::NEG_INFINITY, f64::max);
    if max_re >= -HURWITZ_TOL {
        return Err(Error::Stability(format!(
            "A is not Hurwitz (max real part {max_re})"
        )));
    }
    // Leading eigenvalue: largest real part, then non-negative imaginary part.
    let leading = eig
        .iter()
        .copied()
        .filter(|l| l.re >= max_re - 1e-12)
        .max_by(|x, y| x.im.total_cmp(&y.im))
        .expect("non-empty spectrum");
    let leading = if leading.im.abs() < 1e-12 {
        Complex::new(leading.re, 0.0)
    } else {
        leading
    };
    let v = left_eigenvector(a, leading);

    let sd = sigma_delta.map(|x| Complex::new(x, 0.0));
    let sv = (&sd * &v).norm();
    let sigma_v_nonzero = sv > sigma_v_rel_tol * sigma_delta.norm() && sv > 0.0;

    Ok(EigenReport {
        eigenvalues: eig.iter().map(|l| (l.re, l.im)).collect(),
        rho0: -max_re,
        leading_eigenvalue: (leading.re, leading.im),
        leading_left_eigenvector: v.iter().map(|c| (c.re, c.im)).collect(),
        half_condition: max_re + 0.5 < -HURWITZ_TOL,
        one_condition: max_re + 1.0 < -HURWITZ_TOL,
        sigma_v_nonzero,
    })
}

/// Null vector of `Aᵀ − λI` (so `vᵀA = λvᵀ`) from the smallest singular
/// direction, normalized to unit length with its largest entry real positive.
fn left_eigenvector(a: &DMatrix<f64>, lambda: Complex<f64>) -> DVector<Complex<f64>> {
    let d = a.nrows();
    let m = DMatrix::from_fn(d, d, |i, j| {
        let mut x = Complex::new(a[(j, i)], 0.0);
        if i == j {
            x -= lambda;
        }
        x
    });
    let svd = m.svd(false, true);
    let v_t = svd.v_t.expect("requested V");
    let (k, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1))
        .expect("non-empty");
    let mut v: DVector<Complex<f64>> = v_t.row(k).transpose().map(|c| c.conj());
    let norm = v.norm();
    v /= Complex::new(norm, 0.0);
    let pivot = v
        .iter()
        .copied()
        .max_by(|x, y| x.norm().total_cmp(&y.norm()))
        .expect("non-empty");
    let phase = pivot.conj() / Complex::new(pivot.norm(), 0.0);
    v.map(|c| {
        let r = c * phase;
        Complex::new(r.re, if r.im.abs() < 1e-15 { 0.0 } else { r.im })
    })
}

fn shifted(a: &DMatrix<f64>, shift: f64) -> DMatrix<f64> {
    a + DMatrix::identity(a.nrows(), a.nrows()) * shift
}

/// `Σ_θ` solving `[½I+A]Σ + Σ[½I+A]ᵀ + Σ_Δ = 0`.
pub fn sigma_theta(a: &DMatrix<f64>, sigma_delta: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let report = eigen_report(a, sigma_delta)?;
    if !report.half_condition {
        return Err(Error::RateDegenerate {
            rho0: report.rho0,
            exponent: 2.0 * report.rho0,
        });
    }
    Ok(solve_lyapunov(&shifted(a, 0.5), sigma_delta)?.sigma)
}

/// `Σ_θ^g` solving `[½I+gA]Σ + Σ[½I+gA]ᵀ + g²Σ_Δ = 0`.
pub fn sigma_theta_gain(a: &DMatrix<f64>, sigma_delta: &DMatrix<f64>, gain: f64) -> Result<DMatrix<f64>> {
    let m = shifted(&(a * gain), 0.5);
    if !linalg::is_hurwitz(&m) {
        let rho0 = -linalg::spectral_abscissa(a);
        let hint = if rho0 > 0.0 {
            format!("; need g > {} for this A", 1.0 / (2.0 * rho0))
        } else {
            String::new()
        };
        return Err(Error::Stability(format!("½I + gA not Hurwitz at g = {gain}{hint}")));
    }
    Ok(solve_lyapunov(&m, &(sigma_delta * (gain * gain)))?.sigma)
}

/// Matrix-gain variant: `[½I+GA]Σ + Σ[½I+GA]ᵀ + GΣ_ΔGᵀ = 0`.
pub fn sigma_theta_matrix_gain(
    a: &DMatrix<f64>,
    sigma_delta: &DMatrix<f64>,
    gain: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let m = shifted(&(gain * a), 0.5);
    if !linalg::is_hurwitz(&m) {
        return Err(Error::Stability("½I + GA not Hurwitz".into()));
    }
    Ok(solve_lyapunov(&m, &(gain * sigma_delta * gain.transpose()))?.sigma)
}

/// The gain `G = −A⁻¹`.
pub fn newton_gain(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    a.clone()
        .try_inverse()
        .map(|inv| -inv)
        .ok_or_else(|| Error::Singular("A is singular".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GainOptimum {
    pub gain: f64,
    pub trace: f64,
}

/// Minimize `trace Σ_θ^g` over the admissible part of `grid`, then refine by
/// golden-section search between the neighbours of the best grid point.
pub fn optimal_scalar_gain(a: &DMatrix<f64>, sigma_delta: &DMatrix<f64>, grid: &[f64]) -> Result<GainOptimum> {
    let objective = |g: f64| sigma_theta_gain(a, sigma_delta, g).map(|s| s.trace()).ok();
    let mut admissible: Vec<(f64, f64)> = grid
        .iter()
        .filter_map(|&g| objective(g).map(|t| (g, t)))
        .collect();
    admissible.sort_by(|x, y| x.0.total_cmp(&y.0));
    let best = admissible
        .iter()
        .enumerate()
        .min_by(|x, y| x.1 .1.total_cmp(&y.1 .1))
        .map(|(i, _)| i)
        .ok_or_else(|| Error::InvalidInput("no admissible gain in the grid".into()))?;
    let mut lo = if best > 0 { admissible[best - 1].0 } else { admissible[best].0 };
    let mut hi = admissible.get(best + 1).map_or(admissible[best].0, |p| p.0);
    let f = |g: f64| objective(g).unwrap_or(f64::INFINITY);

    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while hi - lo > 1e-7 {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = f(x2);
        }
    }
    let gain = 0.5 * (lo + hi);
    let (g0, t0) = admissible[best];
    let trace = f(gain);
    Ok(if trace <= t0 {
        GainOptimum { gain, trace }
    } else {
        GainOptimum { gain: g0, trace: t0 }
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SecondOrder {
    /// `Σ_♯` from the combined Lyapunov equation.
    #[serde(serialize_with = "ser_matrix")]
    pub sharp: DMatrix<f64>,
    /// `Σ_♯^{(1)}`: `[I+A]Σ + Σ[I+A]ᵀ + AΣ_θAᵀ − Σ_Δ = 0`.
    #[serde(serialize_with = "ser_matrix")]
    pub sharp_1: DMatrix<f64>,
    /// `Σ_♯^{(2)}`: `[I+A]Σ + Σ[I+A]ᵀ − [I+A]C − Cᵀ[I+A]ᵀ = 0`, `C = Cov_π(Δ̂^m, Δ^m)`.
    #[serde(serialize_with = "ser_matrix")]
    pub sharp_2: DMatrix<f64>,
    /// `Σ_{θ,2} = Σ_♯ + Σ_Z − E_π[Δ^m Ẑᵀ] − E_π[Ẑ (Δ^m)ᵀ]`.
    #[serde(serialize_with = "ser_matrix")]
    pub sigma_theta_2: DMatrix<f64>,
    pub residual: f64,
}

/// Second-order coefficient for gain 1 (pass `g·A` and `stats.scaled(g)` for
/// other gains).
pub fn sigma_theta_2(a: &DMatrix<f64>, stats: &NoiseStats) -> Result<SecondOrder> {
    let report = eigen_report(a, &stats.sigma_delta)?;
    if !report.one_condition {
        return Err(Error::FinerBoundUnavailable { rho0: report.rho0 });
    }
    let st = solve_lyapunov(&shifted(a, 0.5), &stats.sigma_delta)?.sigma;
    let ipa = shifted(a, 1.0);
    let c = &stats.cross_m_mhat;
    let base = a * &st * a.transpose() - &stats.sigma_delta;
    let coupling = -(&ipa * c) - c.transpose() * ipa.transpose();

    // [I+A](Σ − C) + (Σ − Cᵀ)[I+A]ᵀ + AΣ_θAᵀ − Σ_Δ = 0 in standard form.
    let q = &base + &coupling;
    let combined = solve_lyapunov(&ipa, &q)?;
    let sharp_1 = solve_lyapunov(&ipa, &base)?.sigma;
    let sharp_2 = solve_lyapunov(&ipa, &coupling)?.sigma;
    let czh = &stats.cross_m_zhat;
    let sigma_theta_2 = linalg::symmetrize(&(&combined.sigma + &stats.sigma_z - czh - czh.transpose()));
    Ok(SecondOrder {
        sharp: combined.sigma,
        sharp_1,
        sharp_2,
        sigma_theta_2,
        residual: combined.residual,
    })
}

/// Full prediction for a linear SA problem with scalar gain.
#[derive(Debug, Clone, Serialize)]
pub struct CovariancePrediction {
    pub report: EigenReport,
    /// `Σ_θ^g`; absent on the degraded branch.
    #[serde(serialize_with = "ser_opt_matrix")]
    pub sigma_theta: Option<DMatrix<f64>>,
    pub second_order: Option<SecondOrder>,
    pub rate_exponent: f64,
    pub gain: f64,
    /// Caller-fitted constant `c` for the degraded envelope `c·n^{-2ρ₀}`.
    pub envelope_constant: Option<f64>,
}

fn ser_opt_matrix<S: serde::Serializer>(m: &Option<DMatrix<f64>>, s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::Serialize;
    m.as_ref().map(linalg::matrix_to_rows).serialize(s)
}

#[derive(Debug, Clone, PartialEq)]
pub enum PredictedCovariance {
    Matrix(DMatrix<f64>),
    /// `c · n^{-exponent}` for the trace (or projected moment); `value` is
    /// `None` until a constant has been fitted.
    Envelope { exponent: f64, value: Option<f64> },
}

impl CovariancePrediction {
    /// The report is for the effective matrix `gA`.
    pub fn new(a: &DMatrix<f64>, stats: &NoiseStats, gain: f64) -> Result<Self> {
        let ga = a * gain;
        let scaled = stats.scaled(gain);
        let report = eigen_report(&ga, &scaled.sigma_delta)?;
        let sigma_theta = if report.half_condition {
            Some(sigma_theta_gain(a, &stats.sigma_delta, gain)?)
        } else {
            None
        };
        let second_order = if report.one_condition {
            Some(sigma_theta_2(&ga, &scaled)?)
        } else {
            None
        };
        Ok(Self {
            rate_exponent: report.rate_exponent(),
            report,
            sigma_theta,
            second_order,
            gain,
            envelope_constant: None,
        })
    }

    pub fn predicted_covariance(&self, n: usize) -> PredictedCovariance {
        let nf = n.max(1) as f64;
        match &self.sigma_theta {
            Some(st) => {
                let mut cov = st / nf;
                if let Some(so) = &self.second_order {
                    cov += &so.sigma_theta_2 / (nf * nf);
                }
                PredictedCovariance::Matrix(cov)
            }
            None => PredictedCovariance::Envelope {
                exponent: self.rate_exponent,
                value: self.envelope_constant.map(|c| c * nf.powf(-self.rate_exponent)),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::FiniteChain;
    use crate::poisson::{noise_stats, StateFunction};
    use approx::assert_abs_diff_eq;

    fn m1(x: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, x)
    }

    #[test]
    fn scalar_lyapunov() {
        let sol = solve_lyapunov(&m1(-0.5), &m1(1.0)).unwrap();
        assert_abs_diff_eq!(sol.sigma[(0, 0)], 1.0, epsilon = 1e-14);
        assert!(sol.warning.is_none());
    }

    #[test]
    fn zero_q_and_identity_m() {
        let m = DMatrix::from_row_slice(2, 2, &[-1.0, 0.3, 0.0, -2.0]);
        let sol = solve_lyapunov(&m, &DMatrix::zeros(2, 2)).unwrap();
        assert_eq!(linalg::max_abs(&sol.sigma), 0.0);
        let q = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let sol = solve_lyapunov(&(-DMatrix::identity(2, 2)), &q).unwrap();
        assert!((sol.sigma - q / 2.0).amax() < 1e-15);
    }

    #[test]
    fn non_hurwitz_rejected() {
        assert!(matches!(solve_lyapunov(&m1(0.1), &m1(1.0)), Err(Error::Stability(_))));
        assert!(matches!(solve_lyapunov(&m1(0.0), &m1(1.0)), Err(Error::Stability(_))));
    }

    #[test]
    fn eigen_report_boundaries() {
        let z = DMatrix::zeros(2, 2);
        let r = eigen_report(&(-DMatrix::identity(2, 2)), &z).unwrap();
        assert_abs_diff_eq!(r.rho0, 1.0, epsilon = 1e-14);
        assert!(r.half_condition && !r.one_condition);

        let r = eigen_report(&DMatrix::from_diagonal(&DVector::from_vec(vec![-0.3, -2.0])), &z).unwrap();
        assert_abs_diff_eq!(r.rho0, 0.3, epsilon = 1e-14);
        assert!(!r.half_condition);

        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 5.0, 0.0, -1.2]);
        let r = eigen_report(&a, &z).unwrap();
        assert_abs_diff_eq!(r.rho0, 1.0, epsilon = 1e-12);
        let mut eig: Vec<f64> = r.eigenvalues.iter().map(|e| e.0).collect();
        eig.sort_by(f64::total_cmp);
        assert_abs_diff_eq!(eig[0], -1.2, epsilon = 1e-12);
        assert_abs_diff_eq!(eig[1], -1.0, epsilon = 1e-12);
        // vᵀA = λvᵀ
        let v = r.left_vector();
        let ac = a.map(|x| Complex::new(x, 0.0));
        let lhs = v.transpose() * ac;
        let lam = Complex::new(r.leading_eigenvalue.0, r.leading_eigenvalue.1);
        assert!((lhs - v.transpose() * lam).norm() < 1e-8);

        assert!(matches!(eigen_report(&m1(0.2), &m1(1.0)), Err(Error::Stability(_))));
    }

    #[test]
    fn complex_leading_pair() {
        let a = DMatrix::from_row_slice(2, 2, &[-0.3, 1.0, -1.0, -0.3]);
        let r = eigen_report(&a, &DMatrix::identity(2, 2)).unwrap();
        assert_abs_diff_eq!(r.rho0, 0.3, epsilon = 1e-12);
        assert!(r.leading_eigenvalue.1 > 0.0);
        let v = r.left_vector();
        let lam = Complex::new(r.leading_eigenvalue.0, r.leading_eigenvalue.1);
        let lhs = v.transpose() * a.map(|x| Complex::new(x, 0.0));
        assert!((lhs - v.transpose() * lam).norm() < 1e-8);
        assert_abs_diff_eq!(v.norm(), 1.0, epsilon = 1e-12);
        assert!(r.sigma_v_nonzero);
    }

    #[test]
    fn sigma_v_zero_detected() {
        // Noise only in the fast coordinate; the slow direction sees none.
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![-0.3, -2.0]));
        let sd = DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, 1.0]));
        assert!(!eigen_report(&a, &sd).unwrap().sigma_v_nonzero);
    }

    #[test]
    fn sigma_theta_examples() {
        let sd = DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 2.0]);
        let st = sigma_theta(&(-DMatrix::identity(2, 2)), &sd).unwrap();
        assert!((st - &sd).amax() < 1e-14);
        assert_abs_diff_eq!(sigma_theta(&m1(-2.0), &m1(3.0)).unwrap()[(0, 0)], 1.0, epsilon = 1e-14);
        assert_eq!(sigma_theta(&m1(-2.0), &m1(0.0)).unwrap()[(0, 0)], 0.0);
        match sigma_theta(&m1(-0.3), &m1(1.0)) {
            Err(Error::RateDegenerate { rho0, exponent }) => {
                assert_abs_diff_eq!(rho0, 0.3, epsilon = 1e-14);
                assert_abs_diff_eq!(exponent, 0.6, epsilon = 1e-14);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn gain_examples() {
        let a = m1(-0.3);
        let sd = m1(1.0);
        let s = sigma_theta_gain(&a, &sd, 10.0 / 3.0).unwrap();
        assert_abs_diff_eq!(s[(0, 0)], 100.0 / 9.0, epsilon = 1e-12);
        match sigma_theta_gain(&a, &sd, 5.0 / 3.0) {
            Err(Error::Stability(msg)) => assert!(msg.contains("need g >"), "{msg}"),
            other => panic!("{other:?}"),
        }
        let a2 = DMatrix::from_row_slice(2, 2, &[-1.0, 0.4, 0.1, -2.0]);
        let sd2 = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        assert_eq!(sigma_theta_gain(&a2, &sd2, 1.0).unwrap(), sigma_theta(&a2, &sd2).unwrap());
    }

    #[test]
    fn optimal_gain_scalar() {
        let grid: Vec<f64> = (1..=100).map(|k| 0.1 * k as f64).collect();
        let opt = optimal_scalar_gain(&m1(-0.3), &m1(1.0), &grid).unwrap();
        assert_abs_diff_eq!(opt.gain, 10.0 / 3.0, epsilon = 1e-4);
        assert_abs_diff_eq!(opt.trace, 100.0 / 9.0, epsilon = 1e-9);
        let opt = optimal_scalar_gain(&m1(-1.0), &m1(1.0), &grid).unwrap();
        assert_abs_diff_eq!(opt.gain, 1.0, epsilon = 1e-4);
        assert!(optimal_scalar_gain(&m1(-0.3), &m1(1.0), &[0.5, 1.0]).is_err());
    }

    #[test]
    fn newton_gain_diagonal_decouples() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![-0.3, -2.0]));
        let sd = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 5.0]));
        let s = sigma_theta_matrix_gain(&a, &sd, &newton_gain(&a).unwrap()).unwrap();
        let grid: Vec<f64> = (1..=200).map(|k| 0.05 * k as f64).collect();
        for i in 0..2 {
            let opt = optimal_scalar_gain(&m1(a[(i, i)]), &m1(sd[(i, i)]), &grid).unwrap();
            assert_abs_diff_eq!(s[(i, i)], opt.trace, epsilon = 1e-9);
        }
        assert_abs_diff_eq!(s[(0, 1)], 0.0, epsilon = 1e-14);
    }

    fn two_state_stats() -> NoiseStats {
        let chain = FiniteChain::from_rows(&[vec![0.75, 0.25], vec![0.25, 0.75]]).unwrap();
        noise_stats(&chain, &StateFunction::scalar(&[1.0, -1.0]).unwrap()).unwrap()
    }

    #[test]
    fn second_order_split_matches_combined() {
        let stats = two_state_stats();
        let so = sigma_theta_2(&m1(-2.0), &stats).unwrap();
        assert!((&so.sharp_1 + &so.sharp_2 - &so.sharp).amax() <= 1e-10);
        assert!(so.residual <= 1e-10);
        // Closed-form scalar value for this chain: Σ_♯ = 6.5, Σ_Z = 4,
        // cross term 6, so Σ_{θ,2} = 6.5 + 4 − 12.
        assert_abs_diff_eq!(so.sigma_theta_2[(0, 0)], -1.5, epsilon = 1e-12);
        assert!(matches!(
            sigma_theta_2(&m1(-1.0), &stats),
            Err(Error::FinerBoundUnavailable { .. })
        ));
    }

    #[test]
    fn second_order_zero_noise() {
        let so = sigma_theta_2(&m1(-2.0), &NoiseStats::zeros(1)).unwrap();
        assert_eq!(so.sigma_theta_2[(0, 0)], 0.0);
    }

    #[test]
    fn prediction_scaling() {
        let stats = two_state_stats();
        let pred = CovariancePrediction::new(&m1(-2.0), &stats, 1.0).unwrap();
        let PredictedCovariance::Matrix(p1) = pred.predicted_covariance(1) else { panic!() };
        assert_abs_diff_eq!(p1[(0, 0)], 1.0 - 1.5, epsilon = 1e-12);
        let pred = CovariancePrediction::new(&m1(-1.0), &stats, 1.0).unwrap();
        assert!(pred.second_order.is_none());
        let (PredictedCovariance::Matrix(a), PredictedCovariance::Matrix(b)) =
            (pred.predicted_covariance(1000), pred.predicted_covariance(2000))
        else {
            panic!()
        };
        assert_abs_diff_eq!(a[(0, 0)], 2.0 * b[(0, 0)], epsilon = 1e-15);
        let mut degraded = CovariancePrediction::new(&m1(-0.3), &stats, 1.0).unwrap();
        assert_abs_diff_eq!(degraded.rate_exponent, 0.6, epsilon = 1e-12);
        degraded.envelope_constant = Some(2.0);
        match degraded.predicted_covariance(100) {
            PredictedCovariance::Envelope { value: Some(v), .. } => {
                assert_abs_diff_eq!(v, 2.0 * 100f64.powf(-0.6), epsilon = 1e-14)
            }
            other => panic!("{other:?}"),
        }
    }
}
