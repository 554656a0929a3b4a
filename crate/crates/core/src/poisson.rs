//! Poisson equations for finite chains (and the truncated M/M/1 queue), and
//! the stationary noise statistics every covariance formula consumes.
//!
//! For a zero-mean `f̃` the first Poisson equation is `f̂ − P f̂ = f̃`; the
//! second one replaces `f̃` by `f̂`. Both are solved through the fundamental
//! matrix `(I − P + 𝟙πᵀ)⁻¹` and recentred so that `π(f̂) = 0`.
//!
//! Along a path, with `Z_n = f̂(Φ_n)` and the martingale increment
//! `Δ^m_{n+1} = f̂(Φ_{n+1}) − (P f̂)(Φ_n)`,
//!
//! ```text
//! f̃(Φ_n) = Δ^m_{n+1} + Z_n − Z_{n+1}.
//! ```

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::chain::{self, FiniteChain, QueueChain};
use crate::linalg;
use crate::{Error, Result};

/// Tolerance on `|π(f̃)|` accepted as "zero mean".
pub const MEAN_TOL: f64 = 1e-10;
/// Poisson residual bound, relative to `max(1, ‖f̂‖∞)`.
pub const RESIDUAL_TOL: f64 = 1e-10;

/// A vector-valued function on the state space: row `z` holds `f(z) ∈ ℝ^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateFunction {
    values: DMatrix<f64>,
}

impl StateFunction {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.ncols() == 0 || values.nrows() == 0 {
            return Err(Error::Dimension("state function needs S >= 1 rows and d >= 1 columns".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("state function has non-finite entries".into()));
        }
        Ok(Self { values })
    }

    pub fn scalar(values: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_column_slice(values.len(), 1, values))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(linalg::matrix_from_rows(rows)?)
    }

    pub fn zeros(num_states: usize, dim: usize) -> Self {
        Self {
            values: DMatrix::zeros(num_states, dim),
        }
    }

    pub fn num_states(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    /// `f(z)` as a column vector.
    pub fn at(&self, z: usize) -> DVector<f64> {
        self.values.row(z).transpose()
    }

    pub fn mean(&self, pi: &DVector<f64>) -> DVector<f64> {
        self.values.transpose() * pi
    }

    /// `(P f)(z)` for every `z`.
    pub fn apply_transition(&self, chain: &FiniteChain) -> StateFunction {
        StateFunction {
            values: chain.transition() * &self.values,
        }
    }

    pub fn scaled(&self, factor: f64) -> StateFunction {
        StateFunction {
            values: &self.values * factor,
        }
    }

    fn check_states(&self, s: usize) -> Result<()> {
        if self.num_states() != s {
            return Err(Error::Dimension(format!(
                "state function has {} rows, chain has {s} states",
                self.num_states()
            )));
        }
        Ok(())
    }
}

/// `f̃ = f − π(f)`.
pub fn center(f: &StateFunction, pi: &DVector<f64>) -> Result<StateFunction> {
    f.check_states(pi.len())?;
    let mean = f.mean(pi);
    let mut values = f.values.clone();
    for mut row in values.row_iter_mut() {
        row -= mean.transpose();
    }
    Ok(StateFunction { values })
}

#[derive(Debug, Clone)]
pub struct PoissonSolution {
    pub fhat: StateFunction,
    /// `‖(f̂ − P f̂) − f̃‖∞` over all states (for truncated queues, levels below
    /// the boundary).
    pub residual_norm: f64,
    /// `max_i |π(f̂_i)|`.
    pub mean_norm: f64,
    /// Estimated error from finite-section truncation, when applicable.
    pub truncation_error: Option<f64>,
}

impl PoissonSolution {
    /// Martingale increment `f̂(z') − (P f̂)(z)` for every transition.
    pub fn martingale_increments(&self, chain: &FiniteChain) -> MartingaleIncrements {
        MartingaleIncrements {
            fhat: self.fhat.values.clone(),
            pfhat: chain.transition() * &self.fhat.values,
        }
    }
}

/// Lookup table for `Δ^m(z → z') = f̂(z') − (P f̂)(z)`.
#[derive(Debug, Clone)]
pub struct MartingaleIncrements {
    fhat: DMatrix<f64>,
    pfhat: DMatrix<f64>,
}

impl MartingaleIncrements {
    pub fn at(&self, from: usize, to: usize) -> DVector<f64> {
        (self.fhat.row(to) - self.pfhat.row(from)).transpose()
    }

    pub fn fhat_at(&self, z: usize) -> DVector<f64> {
        self.fhat.row(z).transpose()
    }
}

fn mean_abs(f: &StateFunction, pi: &DVector<f64>) -> f64 {
    f.mean(pi).amax()
}

fn residual(chain: &FiniteChain, fhat: &DMatrix<f64>, ftilde: &DMatrix<f64>, rows: usize) -> f64 {
    let r = fhat - chain.transition() * fhat - ftilde;
    r.rows(0, rows).amax()
}

/// Solve `f̂ − P f̂ = f̃` with `π(f̂) = 0`.
pub fn solve_poisson(chain: &FiniteChain, ftilde: &StateFunction) -> Result<PoissonSolution> {
    let pi = chain::stationary_dist(chain)?;
    solve_poisson_with(chain, &pi, ftilde)
}

pub(crate) fn solve_poisson_with(
    chain: &FiniteChain,
    pi: &DVector<f64>,
    ftilde: &StateFunction,
) -> Result<PoissonSolution> {
    let s = chain.num_states();
    ftilde.check_states(s)?;
    let m = mean_abs(ftilde, pi);
    if m > MEAN_TOL {
        return Err(Error::InvalidInput(format!(
            "Poisson right-hand side has stationary mean {m:e}; center it first"
        )));
    }
    let fundamental =
        DMatrix::identity(s, s) - chain.transition() + DMatrix::from_fn(s, s, |_, j| pi[j]);
    let raw = linalg::solve(&fundamental, &ftilde.values, "fundamental matrix")?;
    let fhat = center(&StateFunction { values: raw }, pi)?;
    finish(chain, pi, fhat, &ftilde.values, s, None)
}

fn finish(
    chain: &FiniteChain,
    pi: &DVector<f64>,
    fhat: StateFunction,
    ftilde: &DMatrix<f64>,
    residual_rows: usize,
    truncation_error: Option<f64>,
) -> Result<PoissonSolution> {
    let residual_norm = residual(chain, &fhat.values, ftilde, residual_rows);
    let scale = linalg::max_abs(&fhat.values).max(1.0);
    if residual_norm > 1e2 * RESIDUAL_TOL * scale {
        return Err(Error::Singular(format!(
            "Poisson residual {residual_norm:e} too large"
        )));
    }
    let mean_norm = mean_abs(&fhat, pi);
    Ok(PoissonSolution {
        fhat,
        residual_norm,
        mean_norm,
        truncation_error,
    })
}

/// Solve `f̂̂ − P f̂̂ = f̂` with `π(f̂̂) = 0`.
pub fn solve_second_poisson(chain: &FiniteChain, first: &PoissonSolution) -> Result<PoissonSolution> {
    solve_poisson(chain, &first.fhat)
}

/// Poisson solution for the M/M/1 queue on levels `0..=N`, `N` the queue's
/// analysis truncation, with a reflecting boundary at `N`.
///
/// `f` is centred under the truncated invariant law before solving. The
/// solve is the backward recursion on increments `d(z) = f̂(z+1) − f̂(z)`:
///
/// ```text
/// p_s d(N−1) = f̃(N),    p_s d(z−1) = f̃(z) + p_a d(z)
/// ```
///
/// which contracts by `ρ_q` per level and so stays accurate for large `N`.
pub fn mm1_solve_poisson(queue: &QueueChain, f: &StateFunction, tail_tol: f64) -> Result<PoissonSolution> {
    queue.require_stable()?;
    let level = queue.analysis_truncation;
    f.check_states(level + 1)?;
    if level == 0 {
        return Err(Error::InvalidInput("truncation level must be at least 1".into()));
    }
    let error = mm1_truncation_error(queue, f, level);
    if error > tail_tol {
        return Err(Error::Truncation {
            level,
            tol: tail_tol,
            required: mm1_required_level(queue, f, tail_tol),
        });
    }

    let chain = queue.truncated_chain(level)?;
    let norm = 1.0 - queue.tail_mass(level);
    let pi = DVector::from_fn(level + 1, |z, _| {
        (1.0 - queue.load) * queue.load.powi(z as i32) / norm
    });
    let ftilde = center(f, &pi)?;
    let (pa, ps) = (queue.arrival_prob, queue.service_prob);
    let d = f.dim();
    let mut fhat = DMatrix::zeros(level + 1, d);
    for i in 0..d {
        let mut inc = vec![0.0; level];
        inc[level - 1] = ftilde.values[(level, i)] / ps;
        for z in (1..level).rev() {
            inc[z - 1] = (ftilde.values[(z, i)] + pa * inc[z]) / ps;
        }
        for z in 0..level {
            fhat[(z + 1, i)] = fhat[(z, i)] + inc[z];
        }
    }
    let fhat = center(&StateFunction { values: fhat }, &pi)?;
    finish(&chain, &pi, fhat, &ftilde.values, level, Some(error))
}

/// Linear-growth constant `max_z |f(z)| / (z + 1)` over the supplied levels.
fn growth_constant(f: &StateFunction) -> f64 {
    (0..f.num_states())
        .map(|z| f.at(z).amax() / (z as f64 + 1.0))
        .fold(0.0, f64::max)
}

/// `ρ^{N+1} · max(1, c (N+1))`: stationary tail mass times the growth bound of
/// `f` at the boundary.
pub fn mm1_truncation_error(queue: &QueueChain, f: &StateFunction, level: usize) -> f64 {
    let c = growth_constant(f);
    queue.tail_mass(level) * (c * (level as f64 + 1.0)).max(1.0)
}

fn mm1_required_level(queue: &QueueChain, f: &StateFunction, tail_tol: f64) -> usize {
    let c = growth_constant(f);
    (1..100_000)
        .find(|&n| queue.tail_mass(n) * (c * (n as f64 + 1.0)).max(1.0) <= tail_tol)
        .unwrap_or(usize::MAX)
}

/// Stationary second-order statistics of the noise.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseStats {
    /// `Σ_Δ = E_π[Δ^m (Δ^m)ᵀ]`.
    #[serde(serialize_with = "ser_matrix")]
    pub sigma_delta: DMatrix<f64>,
    /// `Σ_Z = E_π[Z Zᵀ]`, `Z = f̂(Φ)`.
    #[serde(serialize_with = "ser_matrix")]
    pub sigma_z: DMatrix<f64>,
    /// `Cov_π(Δ̂^m, Δ^m) = E_π[Δ̂^m (Δ^m)ᵀ]`.
    #[serde(serialize_with = "ser_matrix")]
    pub cross_m_mhat: DMatrix<f64>,
    /// `E_π[Δ^m Ẑᵀ]` with `Ẑ = f̂̂` at the arrival state.
    #[serde(serialize_with = "ser_matrix")]
    pub cross_m_zhat: DMatrix<f64>,
}

pub(crate) fn ser_matrix<S: serde::Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::Serialize;
    linalg::matrix_to_rows(m).serialize(s)
}

impl NoiseStats {
    pub fn zeros(d: usize) -> Self {
        Self {
            sigma_delta: DMatrix::zeros(d, d),
            sigma_z: DMatrix::zeros(d, d),
            cross_m_mhat: DMatrix::zeros(d, d),
            cross_m_zhat: DMatrix::zeros(d, d),
        }
    }

    pub fn dim(&self) -> usize {
        self.sigma_delta.nrows()
    }

    /// Statistics of the scaled noise `g f*`; every entry is quadratic in `g`.
    pub fn scaled(&self, gain: f64) -> Self {
        let g2 = gain * gain;
        Self {
            sigma_delta: &self.sigma_delta * g2,
            sigma_z: &self.sigma_z * g2,
            cross_m_mhat: &self.cross_m_mhat * g2,
            cross_m_zhat: &self.cross_m_zhat * g2,
        }
    }
}

/// Everything derived from `(P, f*)`: `π`, `f̃`, both Poisson solutions and
/// the statistics.
#[derive(Debug, Clone)]
pub struct NoiseAnalysis {
    pub pi: DVector<f64>,
    pub ftilde: StateFunction,
    pub first: PoissonSolution,
    pub second: PoissonSolution,
    pub stats: NoiseStats,
}

pub fn analyze_noise(chain: &FiniteChain, fstar: &StateFunction) -> Result<NoiseAnalysis> {
    let pi = chain::stationary_dist(chain)?;
    let ftilde = center(fstar, &pi)?;
    let first = solve_poisson_with(chain, &pi, &ftilde)?;
    let second = solve_poisson_with(chain, &pi, &first.fhat)?;

    let s = chain.num_states();
    let d = fstar.dim();
    let dm = first.martingale_increments(chain);
    let dmhat = second.martingale_increments(chain);
    let mut stats = NoiseStats::zeros(d);
    for z in 0..s {
        let fz = first.fhat.at(z);
        stats.sigma_z += pi[z] * &fz * fz.transpose();
        for w in 0..s {
            let weight = pi[z] * chain.prob(z, w);
            if weight == 0.0 {
                continue;
            }
            let m = dm.at(z, w);
            let mhat = dmhat.at(z, w);
            stats.sigma_delta += weight * &m * m.transpose();
            stats.cross_m_mhat += weight * &mhat * m.transpose();
            stats.cross_m_zhat += weight * &m * second.fhat.at(w).transpose();
        }
    }
    stats.sigma_delta = linalg::symmetrize(&stats.sigma_delta);
    stats.sigma_z = linalg::symmetrize(&stats.sigma_z);
    Ok(NoiseAnalysis {
        pi,
        ftilde,
        first,
        second,
        stats,
    })
}

/// Martingale-route statistics; `f*` is centred under `π` first.
pub fn noise_stats(chain: &FiniteChain, fstar: &StateFunction) -> Result<NoiseStats> {
    Ok(analyze_noise(chain, fstar)?.stats)
}

/// Truncated autocovariance sum `Σ_0 + Σ_{k=1}^K (C_k + C_kᵀ)` with
/// `C_k = Σ_z π(z) f*(z) (P^k f*)(z)ᵀ`; `f*` is centred under `π` first.
pub fn sigma_delta_sum(chain: &FiniteChain, fstar: &StateFunction, lag_cut: usize) -> Result<DMatrix<f64>> {
    let pi = chain::stationary_dist(chain)?;
    let f = center(fstar, &pi)?;
    let weighted = DMatrix::from_fn(f.num_states(), f.dim(), |z, i| pi[z] * f.values[(z, i)]);
    let mut total = weighted.transpose() * &f.values;
    let mut pk_f = f.values.clone();
    for _ in 0..lag_cut {
        pk_f = chain.transition() * pk_f;
        let ck = weighted.transpose() * &pk_f;
        total += &ck + ck.transpose();
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn two_state(p: f64, q: f64) -> FiniteChain {
        FiniteChain::from_rows(&[vec![1.0 - p, p], vec![q, 1.0 - q]]).unwrap()
    }

    fn iid(pi: &[f64]) -> FiniteChain {
        FiniteChain::from_rows(&vec![pi.to_vec(); pi.len()]).unwrap()
    }

    #[test]
    fn center_examples() {
        let pi = DVector::from_vec(vec![0.5, 0.5]);
        let f = StateFunction::scalar(&[3.0, 1.0]).unwrap();
        let ft = center(&f, &pi).unwrap();
        assert_eq!(ft.values().as_slice(), &[1.0, -1.0]);
        assert_eq!(center(&ft, &pi).unwrap(), ft);
        let c = center(&StateFunction::scalar(&[2.5, 2.5]).unwrap(), &pi).unwrap();
        assert_eq!(c.values().as_slice(), &[0.0, 0.0]);
        assert!(matches!(
            center(&StateFunction::scalar(&[1.0, 2.0, 3.0]).unwrap(), &pi),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn zero_rhs_gives_zero_solution() {
        let chain = two_state(0.25, 0.125);
        let sol = solve_poisson(&chain, &StateFunction::zeros(2, 2)).unwrap();
        assert_eq!(linalg::max_abs(sol.fhat.values()), 0.0);
        let second = solve_second_poisson(&chain, &sol).unwrap();
        assert_eq!(linalg::max_abs(second.fhat.values()), 0.0);
    }

    #[test]
    fn iid_rows_solution_is_rhs() {
        let chain = iid(&[0.2, 0.3, 0.5]);
        let pi = chain::stationary_dist(&chain).unwrap();
        let ft = center(&StateFunction::scalar(&[1.0, -2.0, 4.0]).unwrap(), &pi).unwrap();
        let sol = solve_poisson(&chain, &ft).unwrap();
        let second = solve_second_poisson(&chain, &sol).unwrap();
        for z in 0..3 {
            assert_abs_diff_eq!(sol.fhat.values()[z], ft.values()[z], epsilon = 1e-14);
            assert_abs_diff_eq!(second.fhat.values()[z], ft.values()[z], epsilon = 1e-14);
        }
    }

    #[test]
    fn eigenvector_rhs_is_geometric() {
        // f̃ = (p, −q) is a (1−p−q)-eigenvector of P, so f̂ = f̃/(p+q) and
        // f̂̂ = f̃/(p+q)².
        let (p, q) = (0.25, 0.125);
        let chain = two_state(p, q);
        let ft = StateFunction::scalar(&[p, -q]).unwrap();
        let sol = solve_poisson(&chain, &ft).unwrap();
        assert_abs_diff_eq!(sol.fhat.values()[0], 2.0 / 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(sol.fhat.values()[1], -1.0 / 3.0, epsilon = 1e-14);
        assert!(sol.residual_norm <= 1e-10 && sol.mean_norm <= 1e-10);
        let second = solve_second_poisson(&chain, &sol).unwrap();
        let s2 = (p + q) * (p + q);
        assert_abs_diff_eq!(second.fhat.values()[0], p / s2, epsilon = 1e-13);
        assert_abs_diff_eq!(second.fhat.values()[1], -q / s2, epsilon = 1e-13);
    }

    #[test]
    fn rejects_uncentred_rhs() {
        let chain = two_state(0.25, 0.125);
        assert!(matches!(
            solve_poisson(&chain, &StateFunction::scalar(&[1.0, 1.0]).unwrap()),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn iid_sigma_delta_is_variance() {
        let chain = iid(&[0.2, 0.3, 0.5]);
        let f = StateFunction::scalar(&[1.0, -2.0, 4.0]).unwrap();
        let stats = noise_stats(&chain, &f).unwrap();
        let mean = 0.2 * 1.0 + 0.3 * -2.0 + 0.5 * 4.0;
        let var = 0.2 * 1.0 + 0.3 * 4.0 + 0.5 * 16.0 - mean * mean;
        assert_abs_diff_eq!(stats.sigma_delta[(0, 0)], var, epsilon = 1e-13);
        assert_abs_diff_eq!(sigma_delta_sum(&chain, &f, 0).unwrap()[(0, 0)], var, epsilon = 1e-13);
    }

    #[test]
    fn symmetric_two_state_sigma_delta_is_three() {
        let chain = two_state(0.25, 0.25);
        let f = StateFunction::scalar(&[1.0, -1.0]).unwrap();
        let stats = noise_stats(&chain, &f).unwrap();
        assert_abs_diff_eq!(stats.sigma_delta[(0, 0)], 3.0, epsilon = 1e-13);
        assert_abs_diff_eq!(sigma_delta_sum(&chain, &f, 50).unwrap()[(0, 0)], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_noise_zero_stats() {
        let chain = two_state(0.25, 0.125);
        let stats = noise_stats(&chain, &StateFunction::zeros(2, 2)).unwrap();
        assert_eq!(stats, NoiseStats::zeros(2));
    }

    #[test]
    fn mm1_zero_function() {
        let q = QueueChain::new(1.0 / 3.0, 40).unwrap();
        let sol = mm1_solve_poisson(&q, &StateFunction::zeros(41, 1), 1e-8).unwrap();
        assert_eq!(linalg::max_abs(sol.fhat.values()), 0.0);
    }

    #[test]
    fn mm1_truncation_refused_when_too_short() {
        let q = QueueChain::new(1.0 / 3.0, 10).unwrap();
        let f = StateFunction::scalar(&(0..=10).map(|z| z as f64).collect::<Vec<_>>()).unwrap();
        match mm1_solve_poisson(&q, &f, 1e-8) {
            Err(Error::Truncation { required, .. }) => {
                assert!(required > 10);
                let q2 = QueueChain::new(1.0 / 3.0, required).unwrap();
                let f2 = StateFunction::scalar(&(0..=required).map(|z| z as f64).collect::<Vec<_>>())
                    .unwrap();
                assert!(mm1_solve_poisson(&q2, &f2, 1e-8).is_ok());
            }
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    fn mm1_linear(level: usize) -> (QueueChain, PoissonSolution) {
        let q = QueueChain::new(1.0 / 3.0, level).unwrap();
        let f: Vec<f64> = (0..=level).map(|z| z as f64 - 1.0).collect();
        let sol = mm1_solve_poisson(&q, &StateFunction::scalar(&f).unwrap(), 1e-8).unwrap();
        (q, sol)
    }

    #[test]
    fn mm1_truncation_stability() {
        let (_, a) = mm1_linear(60);
        let (_, b) = mm1_linear(120);
        // Relative: boundary effects decay like ρ^{N−z} times values of order z².
        for z in 0..=30 {
            let (x, y) = (a.fhat.values()[z], b.fhat.values()[z]);
            assert!((x - y).abs() <= 1e-8 * y.abs().max(1.0), "level {z}: {x} vs {y}");
        }
        for z in 0..=20 {
            assert_abs_diff_eq!(a.fhat.values()[z], b.fhat.values()[z], epsilon = 1e-8);
        }
        assert!(a.residual_norm <= 1e-10, "{}", a.residual_norm);
        assert!(b.residual_norm <= 1e-10, "{}", b.residual_norm);
    }

    #[test]
    fn mm1_recursion_matches_fundamental_matrix() {
        let (q, sol) = mm1_linear(40);
        let chain = q.truncated_chain(40).unwrap();
        let pi = chain::stationary_dist(&chain).unwrap();
        let f: Vec<f64> = (0..=40).map(|z| z as f64 - 1.0).collect();
        let ft = center(&StateFunction::scalar(&f).unwrap(), &pi).unwrap();
        let generic = solve_poisson(&chain, &ft).unwrap();
        for z in 0..=40 {
            assert_abs_diff_eq!(sol.fhat.values()[z], generic.fhat.values()[z], epsilon = 1e-9);
        }
    }

    #[test]
    fn mm1_linear_function_closed_form_increment() {
        // For F(z) = z and ρ = 1/2, f̂(z+1) − f̂(z) = (z+1)/(p_s − p_a) away
        // from the boundary (drift −(p_s − p_a) per step).
        let (q, sol) = mm1_linear(120);
        let slope = 1.0 / (q.service_prob - q.arrival_prob);
        for z in 0..20 {
            let inc = sol.fhat.values()[z + 1] - sol.fhat.values()[z];
            assert_abs_diff_eq!(inc, (z as f64 + 1.0) * slope, epsilon = 1e-8);
        }
    }
}
