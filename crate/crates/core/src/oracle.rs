//! Exact propagation of the first two moments of `(θ̃_n, Φ_n)` on a finite
//! chain. No sampling is involved.
//!
//! Both recursions here are affine in `θ̃` with coefficients that depend only
//! on `Φ_{n+1}`: `θ̃_{n+1} = B_{n+1}(Φ_{n+1})θ̃_n + α_{n+1}c(Φ_{n+1})` with
//! `B(z') = I + α𝒜(z')`. Conditioning on `Φ_n` then gives closed recursions
//! for the state-indexed moments
//! `p_n(z) = P(Φ_n = z)`, `m_n(z) = E[θ̃_n 1{Φ_n=z}]`, `S_n(z) = E[θ̃_nθ̃_nᵀ 1{Φ_n=z}]`.

use nalgebra::{DMatrix, DVector};

use crate::chain::FiniteChain;
use crate::engine::{self, Checkpoints, LinearSAProblem, RandomLinearSAProblem};
use crate::linalg;
use crate::{Error, Result};

/// Default cap on `horizon · S · d²`.
pub const DEFAULT_BUDGET: f64 = 1e10;

/// Cap on the number of paths [`enumerate_linear`] and
/// [`enumerate_random_linear`] will visit.
pub const ENUMERATION_LIMIT: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq)]
pub struct MomentState {
    pub step: usize,
    pub occupancy: DVector<f64>,
    pub m: Vec<DVector<f64>>,
    pub s: Vec<DMatrix<f64>>,
}

impl MomentState {
    /// `Φ_0 ~ phi0`, `θ̃_0` deterministic.
    pub fn point_mass(phi0: &DVector<f64>, theta0: &DVector<f64>) -> Result<Self> {
        let outer = theta0 * theta0.transpose();
        Self::from_moments(
            phi0.clone(),
            phi0.iter().map(|&p| theta0 * p).collect(),
            phi0.iter().map(|&p| &outer * p).collect(),
        )
    }

    /// Arbitrary joint initial moments (e.g. a random `θ̃_0` correlated with `Φ_0`).
    pub fn from_moments(occupancy: DVector<f64>, m: Vec<DVector<f64>>, s: Vec<DMatrix<f64>>) -> Result<Self> {
        let n = occupancy.len();
        if m.len() != n || s.len() != n {
            return Err(Error::Dimension("one moment entry per state required".into()));
        }
        if occupancy.iter().any(|&p| p < 0.0) || (occupancy.sum() - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput("initial occupancy is not a distribution".into()));
        }
        let d = m.first().map_or(0, |v| v.len());
        if m.iter().any(|v| v.len() != d) || s.iter().any(|x| x.shape() != (d, d)) {
            return Err(Error::Dimension("inconsistent moment dimensions".into()));
        }
        Ok(Self {
            step: 0,
            occupancy,
            m,
            s,
        })
    }

    pub fn dim(&self) -> usize {
        self.m.first().map_or(0, |v| v.len())
    }

    pub fn mean(&self) -> DVector<f64> {
        self.m
            .iter()
            .fold(DVector::zeros(self.dim()), |acc, v| acc + v)
    }

    pub fn second_moment(&self) -> DMatrix<f64> {
        let d = self.dim();
        self.s.iter().fold(DMatrix::zeros(d, d), |acc, v| acc + v)
    }

    pub fn point(&self) -> MomentPoint {
        let mean = self.mean();
        let second_moment = self.second_moment();
        let cov = linalg::symmetrize(&(&second_moment - &mean * mean.transpose()));
        MomentPoint {
            n: self.step,
            mean,
            second_moment,
            cov,
        }
    }

    /// Mass conservation, symmetry/PSD and per-state Cauchy-Schwarz.
    pub fn check_invariants(&self) -> Result<()> {
        if (self.occupancy.sum() - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput(format!(
                "occupancy sums to {}",
                self.occupancy.sum()
            )));
        }
        for (z, (m, s)) in self.m.iter().zip(&self.s).enumerate() {
            if (s - s.transpose()).amax() > 1e-12 * linalg::max_abs(s).max(1.0) {
                return Err(Error::InvalidInput(format!("S_n({z}) not symmetric")));
            }
            if m.norm_squared() > self.occupancy[z] * s.trace() + 1e-10 {
                return Err(Error::InvalidInput(format!("Cauchy-Schwarz fails at state {z}")));
            }
        }
        let total = self.second_moment();
        if linalg::min_symmetric_eigenvalue(&total) < -1e-10 {
            return Err(Error::InvalidInput("Σ_z S_n(z) is not PSD".into()));
        }
        Ok(())
    }
}

/// Moments of `θ̃_n` at one checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentPoint {
    pub n: usize,
    pub mean: DVector<f64>,
    pub second_moment: DMatrix<f64>,
    pub cov: DMatrix<f64>,
}

impl MomentPoint {
    pub fn trace_cov(&self) -> f64 {
        self.cov.trace()
    }
}

/// Output of a propagation: one point per checkpoint plus the final state.
#[derive(Debug, Clone)]
pub struct OracleRun {
    pub points: Vec<MomentPoint>,
    pub last: MomentState,
}

impl OracleRun {
    pub fn at(&self, n: usize) -> Option<&MomentPoint> {
        self.points.iter().find(|p| p.n == n)
    }
}

fn check_budget(horizon: usize, s: usize, d: usize, budget: f64) -> Result<()> {
    let work = horizon as f64 * s as f64 * (d * d) as f64;
    if work > budget {
        return Err(Error::Budget { work, budget });
    }
    Ok(())
}

/// One exact step from `n` to `n + 1`.
fn step(
    chain: &FiniteChain,
    amap: &[&DMatrix<f64>],
    drive: &[DVector<f64>],
    gain: f64,
    state: &MomentState,
) -> MomentState {
    let s_count = chain.num_states();
    let d = state.dim();
    let p = chain.transition();
    let alpha = gain / (state.step + 1) as f64;
    let eye = DMatrix::<f64>::identity(d, d);
    let mut occupancy = DVector::zeros(s_count);
    let mut m = Vec::with_capacity(s_count);
    let mut s = Vec::with_capacity(s_count);
    for to in 0..s_count {
        let mut p_next = 0.0;
        let mut m_bar = DVector::zeros(d);
        let mut s_bar = DMatrix::zeros(d, d);
        for from in 0..s_count {
            let w = p[(from, to)];
            if w == 0.0 {
                continue;
            }
            p_next += w * state.occupancy[from];
            m_bar.axpy(w, &state.m[from], 1.0);
            s_bar += &state.s[from] * w;
        }
        let b = &eye + amap[to] * alpha;
        let c = &drive[to];
        let bm = &b * m_bar;
        let cross = &bm * c.transpose() * alpha;
        let s_next = &b * s_bar * b.transpose() + &cross + cross.transpose() + c * c.transpose() * (alpha * alpha * p_next);
        occupancy[to] = p_next;
        m.push(bm + c * (alpha * p_next));
        s.push(linalg::symmetrize(&s_next));
    }
    MomentState {
        step: state.step + 1,
        occupancy,
        m,
        s,
    }
}

fn propagate(
    chain: &FiniteChain,
    amap: &[&DMatrix<f64>],
    drive: &[DVector<f64>],
    gain: f64,
    init: &MomentState,
    checkpoints: &Checkpoints,
    budget: f64,
) -> Result<OracleRun> {
    let s_count = chain.num_states();
    if init.occupancy.len() != s_count || drive.len() != s_count {
        return Err(Error::Dimension(format!(
            "chain has {s_count} states; init has {}, drive has {}",
            init.occupancy.len(),
            drive.len()
        )));
    }
    if drive.iter().any(|c| c.len() != init.dim()) {
        return Err(Error::Dimension("drive and θ̃_0 dimensions differ".into()));
    }
    let horizon = checkpoints.horizon();
    if init.step > checkpoints.indices().first().copied().unwrap_or(init.step) {
        return Err(Error::InvalidInput("initial state is past the first checkpoint".into()));
    }
    check_budget(horizon - init.step, s_count, init.dim(), budget)?;
    let mut state = init.clone();
    let mut points = Vec::with_capacity(checkpoints.len());
    let mut next = checkpoints.indices().iter().peekable();
    loop {
        if next.peek() == Some(&&state.step) {
            points.push(state.point());
            next.next();
        }
        if state.step >= horizon {
            break;
        }
        state = step(chain, amap, drive, gain, &state);
    }
    Ok(OracleRun { points, last: state })
}

/// Exact moments of the linear recursion `θ̃_{n+1} = θ̃_n + α_{n+1}[Aθ̃_n + f*(Φ_{n+1})]`.
pub fn propagate_linear(
    chain: &FiniteChain,
    problem: &LinearSAProblem,
    init: &MomentState,
    checkpoints: &Checkpoints,
    budget: Option<f64>,
) -> Result<OracleRun> {
    if problem.noise.num_states() != chain.num_states() {
        return Err(Error::Dimension("noise must have one row per state".into()));
    }
    let drive: Vec<DVector<f64>> = (0..chain.num_states()).map(|z| problem.noise.at(z)).collect();
    let amap = vec![&problem.a; chain.num_states()];
    propagate(
        chain,
        &amap,
        &drive,
        problem.gain,
        init,
        checkpoints,
        budget.unwrap_or(DEFAULT_BUDGET),
    )
}

/// Exact moments of `θ̃°` for a random-matrix recursion.
pub fn propagate_random_linear(
    chain: &FiniteChain,
    problem: &RandomLinearSAProblem,
    init: &MomentState,
    checkpoints: &Checkpoints,
    budget: Option<f64>,
) -> Result<OracleRun> {
    if problem.amap.len() != chain.num_states() {
        return Err(Error::Dimension("𝒜 must have one entry per state".into()));
    }
    let drive = problem.drive();
    let amap: Vec<&DMatrix<f64>> = problem.amap.iter().collect();
    propagate(
        chain,
        &amap,
        &drive,
        problem.gain,
        init,
        checkpoints,
        budget.unwrap_or(DEFAULT_BUDGET),
    )
}

fn enumerate(
    chain: &FiniteChain,
    phi0: &DVector<f64>,
    n: usize,
    run: &dyn Fn(&[usize]) -> Result<DVector<f64>>,
) -> Result<MomentPoint> {
    let s = chain.num_states();
    let count = (s as f64).powi(n as i32 + 1);
    if count > ENUMERATION_LIMIT as f64 {
        return Err(Error::Budget {
            work: count,
            budget: ENUMERATION_LIMIT as f64,
        });
    }
    let mut mean: Option<DVector<f64>> = None;
    let mut second: Option<DMatrix<f64>> = None;
    let mut path = vec![0usize; n + 1];
    for code in 0..count as usize {
        let mut c = code;
        for slot in path.iter_mut() {
            *slot = c % s;
            c /= s;
        }
        let weight = path
            .windows(2)
            .fold(phi0[path[0]], |w, e| w * chain.prob(e[0], e[1]));
        if weight == 0.0 {
            continue;
        }
        let theta = run(&path)?;
        let outer = &theta * theta.transpose();
        mean = Some(mean.map_or_else(|| &theta * weight, |m| m + &theta * weight));
        second = Some(second.map_or_else(|| &outer * weight, |acc| acc + &outer * weight));
    }
    let mean = mean.ok_or_else(|| Error::InvalidInput("no path has positive probability".into()))?;
    let second_moment = second.expect("set together with mean");
    let cov = linalg::symmetrize(&(&second_moment - &mean * mean.transpose()));
    Ok(MomentPoint {
        n,
        mean,
        second_moment,
        cov,
    })
}

/// Brute-force moments of `θ̃_n` by weighting every path `Φ_0..=Φ_n`.
/// Exponential in `n`; meant as an independent check of the propagation.
pub fn enumerate_linear(
    chain: &FiniteChain,
    problem: &LinearSAProblem,
    phi0: &DVector<f64>,
    n: usize,
) -> Result<MomentPoint> {
    let cps = Checkpoints::new(vec![n])?;
    enumerate(chain, phi0, n, &|path| {
        Ok(engine::run_linear_sa(problem, path, &cps)?.checkpoints[0].1.clone())
    })
}

pub fn enumerate_random_linear(
    chain: &FiniteChain,
    problem: &RandomLinearSAProblem,
    phi0: &DVector<f64>,
    n: usize,
) -> Result<MomentPoint> {
    let cps = Checkpoints::new(vec![n])?;
    enumerate(chain, phi0, n, &|path| {
        Ok(engine::run_random_linear_sa(problem, path, &cps)?.checkpoints[0].1.clone())
    })
}
