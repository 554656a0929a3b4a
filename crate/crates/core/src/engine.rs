//! Stochastic-approximation recursions driven by a sampled noise path.
//!
//! Every recursion shares one index convention: the update that produces
//! iterate `n+1` uses step size `α_{n+1} = g/(n+1)` and noise state `Φ_{n+1}`,
//! so a path `Φ_0..=Φ_N` yields iterates `0..=N`.
//!
//! Trajectories hold error coordinates `θ̃ = θ − θ*` except where noted
//! (`run_mcmc_average`, `run_td0` and `run_snr_lstd` return absolute
//! iterates together with `θ*`; use [`Trajectory::relative_to`]).
//!
//! Sign convention for TD: `A_{n+1} = ψ(X_n)(βψ(X_{n+1}) − ψ(X_n))ᵀ` and
//! `b_{n+1} = −c(X_n)ψ(X_n)`, so the update is `+α(A_{n+1}θ_n − b_{n+1})` and
//! `θ*` solves `Aθ* = b`.

use nalgebra::{DMatrix, DVector};

use crate::chain::{self, FiniteChain};
use crate::linalg;
use crate::poisson::{PoissonSolution, StateFunction};
use crate::{Error, Result};

/// Condition number above which the SNR gain is ridged.
pub const SNR_CONDITION_LIMIT: f64 = 1e12;

/// Strictly increasing iterate indices at which trajectories are recorded.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoints {
    indices: Vec<usize>,
    full: bool,
}

impl Checkpoints {
    pub fn new(indices: Vec<usize>) -> Result<Self> {
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput("checkpoints must be strictly increasing".into()));
        }
        Ok(Self { indices, full: false })
    }

    /// `round(ratio^k)` for `k = 0, 1, …`, deduplicated, capped at and
    /// always including `horizon`.
    pub fn geometric(horizon: usize, ratio: f64) -> Self {
        let mut indices = Vec::new();
        if horizon == 0 {
            indices.push(0);
        } else {
            let mut k = 0i32;
            loop {
                let n = ratio.powi(k).round() as usize;
                if n >= horizon {
                    break;
                }
                if indices.last() != Some(&n) {
                    indices.push(n);
                }
                k += 1;
            }
            indices.push(horizon);
        }
        Self { indices, full: false }
    }

    /// Default spacing: ratio `2^{1/4}`.
    pub fn default_geometric(horizon: usize) -> Self {
        Self::geometric(horizon, 2f64.powf(0.25))
    }

    pub fn upto(horizon: usize) -> Self {
        Self {
            indices: (0..=horizon).collect(),
            full: false,
        }
    }

    /// Also keep every iterate in [`Trajectory::full`].
    pub fn with_full_path(mut self) -> Self {
        self.full = true;
        self
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn horizon(&self) -> usize {
        self.indices.last().copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub checkpoints: Vec<(usize, DVector<f64>)>,
    /// Dense record `θ_0..=θ_N` when requested.
    pub full: Option<Vec<DVector<f64>>>,
}

impl Trajectory {
    pub fn at(&self, n: usize) -> Option<&DVector<f64>> {
        self.checkpoints
            .binary_search_by_key(&n, |(k, _)| *k)
            .ok()
            .map(|i| &self.checkpoints[i].1)
    }

    pub fn last(&self) -> Option<&DVector<f64>> {
        self.checkpoints.last().map(|(_, v)| v)
    }

    /// Shift every iterate by `−offset`.
    pub fn relative_to(&self, offset: &DVector<f64>) -> Trajectory {
        Trajectory {
            checkpoints: self.checkpoints.iter().map(|(n, v)| (*n, v - offset)).collect(),
            full: self
                .full
                .as_ref()
                .map(|f| f.iter().map(|v| v - offset).collect()),
        }
    }

    /// Largest sup-norm gap between matching checkpoints.
    pub fn max_abs_diff(&self, other: &Trajectory) -> f64 {
        self.checkpoints
            .iter()
            .zip(&other.checkpoints)
            .map(|((n, a), (m, b))| {
                assert_eq!(n, m, "checkpoint mismatch");
                (a - b).amax()
            })
            .fold(0.0, f64::max)
    }
}

struct Recorder<'a> {
    cps: &'a [usize],
    next: usize,
    out: Vec<(usize, DVector<f64>)>,
    full: Option<Vec<DVector<f64>>>,
}

impl<'a> Recorder<'a> {
    fn new(cps: &'a Checkpoints) -> Self {
        Self {
            cps: &cps.indices,
            next: 0,
            out: Vec::with_capacity(cps.indices.len()),
            full: cps.full.then(|| Vec::with_capacity(cps.horizon() + 1)),
        }
    }

    fn record(&mut self, n: usize, theta: &DVector<f64>) {
        if self.next < self.cps.len() && self.cps[self.next] == n {
            self.out.push((n, theta.clone()));
            self.next += 1;
        }
        if let Some(full) = &mut self.full {
            full.push(theta.clone());
        }
    }

    fn finish(self) -> Trajectory {
        Trajectory {
            checkpoints: self.out,
            full: self.full,
        }
    }
}

fn check_path(path: &[usize], horizon: usize, extra: usize) -> Result<()> {
    if path.len() < horizon + 1 + extra {
        return Err(Error::InvalidInput(format!(
            "path has {} states, need {}",
            path.len(),
            horizon + 1 + extra
        )));
    }
    Ok(())
}

fn rows_of(f: &StateFunction) -> Vec<DVector<f64>> {
    (0..f.num_states()).map(|z| f.at(z)).collect()
}

/// `θ̃_{n+1} = θ̃_n + α_{n+1}[Aθ̃_n + f*(Φ_{n+1})]`, `α_n = g/n`.
#[derive(Debug, Clone)]
pub struct LinearSAProblem {
    pub a: DMatrix<f64>,
    pub noise: StateFunction,
    pub gain: f64,
    pub theta0: DVector<f64>,
}

impl LinearSAProblem {
    pub fn new(a: DMatrix<f64>, noise: StateFunction, gain: f64, theta0: DVector<f64>) -> Result<Self> {
        let d = a.nrows();
        if a.ncols() != d || noise.dim() != d || theta0.len() != d {
            return Err(Error::Dimension(format!(
                "A is {:?}, noise dim {}, θ̃_0 dim {}",
                a.shape(),
                noise.dim(),
                theta0.len()
            )));
        }
        Ok(Self { a, noise, gain, theta0 })
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }
}

/// Linear SA along `path`; iterates up to the last checkpoint.
pub fn run_linear_sa(problem: &LinearSAProblem, path: &[usize], checkpoints: &Checkpoints) -> Result<Trajectory> {
    let horizon = checkpoints.horizon();
    check_path(path, horizon, 0)?;
    let noise = rows_of(&problem.noise);
    let mut theta = problem.theta0.clone();
    let mut tmp = DVector::zeros(problem.dim());
    let mut rec = Recorder::new(checkpoints);
    rec.record(0, &theta);
    for n in 0..horizon {
        let alpha = problem.gain / (n + 1) as f64;
        tmp.gemv(1.0, &problem.a, &theta, 0.0);
        tmp += &noise[path[n + 1]];
        theta.axpy(alpha, &tmp, 1.0);
        rec.record(n + 1, &theta);
    }
    Ok(rec.finish())
}

/// Both forms of the MCMC estimate, in absolute coordinates.
#[derive(Debug, Clone)]
pub struct McmcRun {
    /// `(1/n) Σ_{k=1}^n F(Φ_k)`.
    pub running_mean: Trajectory,
    /// `θ_{n+1} = θ_n + (1/(n+1)) (F(Φ_{n+1}) − θ_n)`.
    pub recursion: Trajectory,
    /// `π(F)`; also reported as the value at `n = 0`.
    pub theta_star: DVector<f64>,
}

/// MCMC averaging as SA with `A = −I`, `g = 1`. `Φ_0` only seeds the path.
pub fn run_mcmc_average(
    chain: &FiniteChain,
    f: &StateFunction,
    path: &[usize],
    checkpoints: &Checkpoints,
) -> Result<McmcRun> {
    let pi = chain::stationary_dist(chain)?;
    if f.num_states() != chain.num_states() {
        return Err(Error::Dimension("F must have one row per state".into()));
    }
    let theta_star = f.mean(&pi);
    let (running_mean, recursion) = mcmc_forms(f, &theta_star, path, checkpoints)?;
    Ok(McmcRun {
        running_mean,
        recursion,
        theta_star,
    })
}

pub(crate) fn mcmc_forms(
    f: &StateFunction,
    theta_star: &DVector<f64>,
    path: &[usize],
    checkpoints: &Checkpoints,
) -> Result<(Trajectory, Trajectory)> {
    let horizon = checkpoints.horizon();
    check_path(path, horizon, 0)?;
    let rows = rows_of(f);
    let mut sum = DVector::zeros(f.dim());
    let mut theta = theta_star.clone();
    let mut mean_rec = Recorder::new(checkpoints);
    let mut sa_rec = Recorder::new(checkpoints);
    mean_rec.record(0, theta_star);
    sa_rec.record(0, &theta);
    for n in 0..horizon {
        let fz = &rows[path[n + 1]];
        sum += fz;
        let alpha = 1.0 / (n + 1) as f64;
        theta.axpy(alpha, &(fz - &theta), 1.0);
        mean_rec.record(n + 1, &(&sum * alpha));
        sa_rec.record(n + 1, &theta);
    }
    Ok((mean_rec.finish(), sa_rec.finish()))
}

/// Running mean of a scalar function of an unbounded path (M/M/1 queue),
/// returned as the error `θ_n − θ*` at each checkpoint.
pub fn running_mean_error(
    f: impl Fn(usize) -> f64,
    theta_star: f64,
    path: &[usize],
    checkpoints: &Checkpoints,
) -> Result<Trajectory> {
    let horizon = checkpoints.horizon();
    check_path(path, horizon, 0)?;
    let mut rec = Recorder::new(checkpoints);
    let mut sum = 0.0;
    rec.record(0, &DVector::zeros(1));
    for n in 0..horizon {
        sum += f(path[n + 1]);
        rec.record(n + 1, &DVector::from_element(1, sum / (n + 1) as f64 - theta_star));
    }
    Ok(rec.finish())
}

/// `θ̃°_{n+1} = θ̃°_n + α_{n+1}[𝒜(Φ_{n+1})θ̃°_n + 𝒜(Φ_{n+1})θ* − ℬ(Φ_{n+1})]`.
#[derive(Debug, Clone)]
pub struct RandomLinearSAProblem {
    pub amap: Vec<DMatrix<f64>>,
    pub bmap: Vec<DVector<f64>>,
    pub theta_star: DVector<f64>,
    pub theta0: DVector<f64>,
    pub gain: f64,
    mean_a: DMatrix<f64>,
    mean_b: DVector<f64>,
}

impl RandomLinearSAProblem {
    /// Checks that `E_π[𝒜]` is Hurwitz and `E_π[𝒜]θ* = E_π[ℬ]` within 1e-8.
    pub fn new(
        chain: &FiniteChain,
        amap: Vec<DMatrix<f64>>,
        bmap: Vec<DVector<f64>>,
        theta_star: DVector<f64>,
        theta0: DVector<f64>,
    ) -> Result<Self> {
        let s = chain.num_states();
        let d = theta_star.len();
        if amap.len() != s || bmap.len() != s {
            return Err(Error::Dimension(format!(
                "need one 𝒜 and ℬ per state ({s}), got {} and {}",
                amap.len(),
                bmap.len()
            )));
        }
        if amap.iter().any(|m| m.shape() != (d, d)) || bmap.iter().any(|b| b.len() != d) || theta0.len() != d {
            return Err(Error::Dimension(format!("all maps must have dimension {d}")));
        }
        let pi = chain::stationary_dist(chain)?;
        let mean_a = amap
            .iter()
            .zip(pi.iter())
            .fold(DMatrix::zeros(d, d), |acc, (m, p)| acc + m * *p);
        let mean_b = bmap
            .iter()
            .zip(pi.iter())
            .fold(DVector::zeros(d), |acc, (b, p)| acc + b * *p);
        if !linalg::is_hurwitz(&mean_a) {
            return Err(Error::Stability("E_π[𝒜] is not Hurwitz".into()));
        }
        let gap = (&mean_a * &theta_star - &mean_b).amax();
        if gap > 1e-8 {
            return Err(Error::InvalidInput(format!("Aθ* − b has size {gap:e}")));
        }
        Ok(Self {
            amap,
            bmap,
            theta_star,
            theta0,
            gain: 1.0,
            mean_a,
            mean_b,
        })
    }

    pub fn with_gain(mut self, gain: f64) -> Self {
        self.gain = gain;
        self
    }

    pub fn dim(&self) -> usize {
        self.theta_star.len()
    }

    pub fn mean_matrix(&self) -> &DMatrix<f64> {
        &self.mean_a
    }

    pub fn mean_vector(&self) -> &DVector<f64> {
        &self.mean_b
    }

    /// `𝒜(z)θ* − ℬ(z)` for every state: the additive noise of the coupled
    /// linear recursion.
    pub fn drive(&self) -> Vec<DVector<f64>> {
        self.amap
            .iter()
            .zip(&self.bmap)
            .map(|(a, b)| a * &self.theta_star - b)
            .collect()
    }

    /// The mean-matrix linear problem driven by [`Self::drive`].
    pub fn linearized(&self) -> Result<LinearSAProblem> {
        let drive = self.drive();
        let d = self.dim();
        let values = DMatrix::from_fn(drive.len(), d, |z, i| drive[z][i]);
        LinearSAProblem::new(self.mean_a.clone(), StateFunction::new(values)?, self.gain, self.theta0.clone())
    }
}

pub fn run_random_linear_sa(
    problem: &RandomLinearSAProblem,
    path: &[usize],
    checkpoints: &Checkpoints,
) -> Result<Trajectory> {
    let horizon = checkpoints.horizon();
    check_path(path, horizon, 0)?;
    let drive = problem.drive();
    let mut theta = problem.theta0.clone();
    let mut tmp = DVector::zeros(problem.dim());
    let mut rec = Recorder::new(checkpoints);
    rec.record(0, &theta);
    for n in 0..horizon {
        let z = path[n + 1];
        let alpha = problem.gain / (n + 1) as f64;
        tmp.gemv(1.0, &problem.amap[z], &theta, 0.0);
        tmp += &drive[z];
        theta.axpy(alpha, &tmp, 1.0);
        rec.record(n + 1, &theta);
    }
    Ok(rec.finish())
}

/// Policy evaluation problem for TD(0) with linear features.
#[derive(Debug, Clone)]
pub struct TDProblem {
    pub chain: FiniteChain,
    pub cost: Vec<f64>,
    pub discount: f64,
    /// Row `x` is `ψ(x)ᵀ`.
    pub basis: DMatrix<f64>,
}

impl TDProblem {
    pub fn new(chain: FiniteChain, cost: Vec<f64>, discount: f64, basis: DMatrix<f64>) -> Result<Self> {
        let s = chain.num_states();
        if cost.len() != s || basis.nrows() != s || basis.ncols() == 0 {
            return Err(Error::Dimension(format!(
                "cost has {} entries, basis is {:?}, chain has {s} states",
                cost.len(),
                basis.shape()
            )));
        }
        if !(0.0..1.0).contains(&discount) {
            return Err(Error::InvalidInput(format!("discount {discount} outside [0, 1)")));
        }
        let pi = chain::stationary_dist(&chain)?;
        let gram = basis.transpose() * DMatrix::from_diagonal(&pi) * &basis;
        if linalg::condition_number(&gram) > 1e12 {
            return Err(Error::DegenerateBasis(
                "basis columns are linearly dependent under π".into(),
            ));
        }
        Ok(Self {
            chain,
            cost,
            discount,
            basis,
        })
    }

    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn psi(&self, x: usize) -> DVector<f64> {
        self.basis.row(x).transpose()
    }
}

/// The transition-pair chain `Φ_{n+1} = (X_n, X_{n+1})` restricted to pairs
/// with `P(x, x') > 0`.
#[derive(Debug, Clone)]
pub struct PairChain {
    pub chain: FiniteChain,
    /// `edges[k] = (x, x')`.
    pub edges: Vec<(usize, usize)>,
    index: Vec<Vec<Option<usize>>>,
}

impl PairChain {
    pub fn new(base: &FiniteChain) -> Result<Self> {
        let s = base.num_states();
        let mut edges = Vec::new();
        let mut index = vec![vec![None; s]; s];
        for x in 0..s {
            for y in 0..s {
                if base.prob(x, y) > 0.0 {
                    index[x][y] = Some(edges.len());
                    edges.push((x, y));
                }
            }
        }
        let m = edges.len();
        let mut p = DMatrix::zeros(m, m);
        for (k, &(_, y)) in edges.iter().enumerate() {
            for w in 0..s {
                if let Some(j) = index[y][w] {
                    p[(k, j)] = base.prob(y, w);
                }
            }
        }
        Ok(Self {
            chain: FiniteChain::new(p)?,
            edges,
            index,
        })
    }

    pub fn num_pairs(&self) -> usize {
        self.edges.len()
    }

    pub fn pair_index(&self, from: usize, to: usize) -> Option<usize> {
        self.index[from][to]
    }

    /// A pair ending at `x`; stands in for `Φ_0` since the pair chain's next
    /// step depends only on the second coordinate.
    pub fn entry_pair(&self, x: usize) -> usize {
        self.edges
            .iter()
            .position(|&(_, y)| y == x)
            .expect("irreducible chain has an edge into every state")
    }

    /// `Φ_0..=Φ_N` for the state path `X_0..=X_N`.
    pub fn pair_path(&self, x_path: &[usize]) -> Vec<usize> {
        let mut out = Vec::with_capacity(x_path.len());
        if let Some(&x0) = x_path.first() {
            out.push(self.entry_pair(x0));
        }
        for w in x_path.windows(2) {
            out.push(self.index[w[0]][w[1]].expect("path follows the support of P"));
        }
        out
    }

    /// Law of `Φ_0` given the law of `X_0`.
    pub fn initial_distribution(&self, x0: &DVector<f64>) -> DVector<f64> {
        let mut p = DVector::zeros(self.num_pairs());
        for (x, &mass) in x0.iter().enumerate() {
            if mass > 0.0 {
                p[self.entry_pair(x)] += mass;
            }
        }
        p
    }
}

#[derive(Debug, Clone)]
pub struct TdMatrices {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub theta_star: DVector<f64>,
    pub pairs: PairChain,
    /// `𝒜`, `ℬ` on the pair chain, ready for the random-linear engine.
    pub random: RandomLinearSAProblem,
}

/// Steady-state TD(0) matrices and the equivalent random-linear problem.
pub fn td_matrices(problem: &TDProblem, theta0: &DVector<f64>) -> Result<TdMatrices> {
    let s = problem.chain.num_states();
    let d = problem.dim();
    let pi = chain::stationary_dist(&problem.chain)?;
    let beta = problem.discount;
    let mut a = DMatrix::zeros(d, d);
    let mut b = DVector::zeros(d);
    for x in 0..s {
        let psi = problem.psi(x);
        b -= &psi * (pi[x] * problem.cost[x]);
        for y in 0..s {
            let p = problem.chain.prob(x, y);
            if p > 0.0 {
                a += (pi[x] * p) * &psi * (problem.psi(y) * beta - &psi).transpose();
            }
        }
    }
    let theta_star = a
        .clone()
        .lu()
        .solve(&b)
        .filter(|_| linalg::condition_number(&a) < 1e12)
        .ok_or_else(|| Error::DegenerateBasis("steady-state TD matrix A is singular".into()))?;

    let pairs = PairChain::new(&problem.chain)?;
    let amap = pairs
        .edges
        .iter()
        .map(|&(x, y)| {
            let psi = problem.psi(x);
            &psi * (problem.psi(y) * beta - &psi).transpose()
        })
        .collect();
    let bmap = pairs
        .edges
        .iter()
        .map(|&(x, _)| problem.psi(x) * -problem.cost[x])
        .collect();
    let random = RandomLinearSAProblem::new(
        &pairs.chain,
        amap,
        bmap,
        theta_star.clone(),
        theta0 - &theta_star,
    )?;
    Ok(TdMatrices {
        a,
        b,
        theta_star,
        pairs,
        random,
    })
}

/// TD(0): `θ_{n+1} = θ_n + α_{n+1} d_{n+1} ψ(X_n)`,
/// `d_{n+1} = c(X_n) + βθ_nᵀψ(X_{n+1}) − θ_nᵀψ(X_n)`. Absolute iterates.
pub fn run_td0(
    problem: &TDProblem,
    x_path: &[usize],
    checkpoints: &Checkpoints,
    theta0: &DVector<f64>,
    gain: f64,
) -> Result<Trajectory> {
    let horizon = checkpoints.horizon();
    check_path(x_path, horizon, 0)?;
    let psis: Vec<DVector<f64>> = (0..problem.chain.num_states()).map(|x| problem.psi(x)).collect();
    let mut theta = theta0.clone();
    let mut rec = Recorder::new(checkpoints);
    rec.record(0, &theta);
    for n in 0..horizon {
        let (x, y) = (x_path[n], x_path[n + 1]);
        let td = problem.cost[x] + problem.discount * theta.dot(&psis[y]) - theta.dot(&psis[x]);
        theta.axpy(gain * td / (n + 1) as f64, &psis[x], 1.0);
        rec.record(n + 1, &theta);
    }
    Ok(rec.finish())
}

#[derive(Debug, Clone)]
pub struct SnrLstdRun {
    /// Absolute SNR iterates.
    pub snr: Trajectory,
    /// `Â_n⁻¹ b̂_n` at checkpoints where `Â_n` is well conditioned.
    pub lstd: Trajectory,
    /// First `n` with `Â_n` well conditioned; SNR holds `θ_0` before it.
    pub first_invertible: usize,
    /// Steps after `first_invertible` that needed the ridge.
    pub ridged_steps: Vec<usize>,
}

/// SNR (stochastic Newton-Raphson with running-average matrix gain) and LSTD
/// on the same path.
///
/// While `Â_n` is still singular the SNR iterate stays at `θ_0`. At the first
/// well-conditioned index `n₀` it takes the full Newton step on the averages,
/// `θ_{n₀} = θ_{n₀−1} − Â_{n₀}⁻¹(Â_{n₀}θ_{n₀−1} − b̂_{n₀})`, which is exactly the
/// regular first step when `n₀ = 1`. Later ill-conditioned gains are
/// regularized with `ridge·I` and logged in `ridged_steps`.
pub fn run_snr_lstd(
    problem: &TDProblem,
    x_path: &[usize],
    checkpoints: &Checkpoints,
    ridge: f64,
    theta0: &DVector<f64>,
) -> Result<SnrLstdRun> {
    let horizon = checkpoints.horizon();
    check_path(x_path, horizon, 0)?;
    let d = problem.dim();
    let beta = problem.discount;
    let psis: Vec<DVector<f64>> = (0..problem.chain.num_states()).map(|x| problem.psi(x)).collect();

    let mut a_hat = DMatrix::<f64>::zeros(d, d);
    let mut b_hat = DVector::<f64>::zeros(d);
    let mut theta = theta0.clone();
    let mut started = false;
    let mut first_invertible = 0;
    let mut ridged_steps = Vec::new();
    let mut snr_rec = Recorder::new(checkpoints);
    let mut lstd_points = Vec::new();
    snr_rec.record(0, &theta);

    for n in 0..horizon {
        let (x, y) = (x_path[n], x_path[n + 1]);
        let alpha = 1.0 / (n + 1) as f64;
        let a_next = &psis[x] * (&psis[y] * beta - &psis[x]).transpose();
        let b_next = &psis[x] * -problem.cost[x];
        a_hat += (&a_next - &a_hat) * alpha;
        b_hat += (&b_next - &b_hat) * alpha;

        let well_conditioned = linalg::condition_number(&a_hat) < SNR_CONDITION_LIMIT;
        if well_conditioned {
            let lstd = linalg::solve_vec(&a_hat, &b_hat, "Â")?;
            if checkpoints.indices.binary_search(&(n + 1)).is_ok() {
                lstd_points.push((n + 1, lstd));
            }
        }
        if !started {
            if well_conditioned {
                let resid = &a_hat * &theta - &b_hat;
                theta -= linalg::solve_vec(&a_hat, &resid, "Â")?;
                started = true;
                first_invertible = n + 1;
            }
        } else {
            let gain = if well_conditioned {
                a_hat.clone()
            } else {
                if ridge <= 0.0 {
                    return Err(Error::SingularGain { step: n + 1 });
                }
                ridged_steps.push(n + 1);
                &a_hat + DMatrix::identity(d, d) * ridge
            };
            let td_vec = &a_next * &theta - &b_next;
            let step = gain
                .lu()
                .solve(&td_vec)
                .ok_or(Error::SingularGain { step: n + 1 })?;
            theta.axpy(-alpha, &step, 1.0);
        }
        snr_rec.record(n + 1, &theta);
    }
    if !started && horizon > 0 {
        return Err(Error::SingularGain { step: horizon });
    }
    Ok(SnrLstdRun {
        snr: snr_rec.finish(),
        lstd: Trajectory {
            checkpoints: lstd_points,
            full: None,
        },
        first_invertible,
        ridged_steps,
    })
}

/// Full-path record of the martingale/telescoping split.
#[derive(Debug, Clone)]
pub struct DecompositionTrace {
    /// `θ̃_n`, `n = 0..=N`.
    pub theta: Vec<DVector<f64>>,
    /// `θ̃^M_n`: driven by `Δ^m_{n+2}`, `θ̃^M_0 = θ̃_0`.
    pub theta_m: Vec<DVector<f64>>,
    /// `θ̃^T_n`: driven by `Z_{n+1} − Z_{n+2}`, `θ̃^T_0 = 0`.
    pub theta_t: Vec<DVector<f64>>,
    /// `Ξ_n` for `n = 1..=N` (`xi[k]` is `Ξ_{k+1}`), run by its own recursion.
    pub xi: Vec<DVector<f64>>,
    /// `Z_n = f̂(Φ_n)`, `n = 0..=N+1`.
    pub z_path: Vec<DVector<f64>>,
    pub gain: f64,
}

impl DecompositionTrace {
    /// `max_n ‖θ̃_n − θ̃^M_n − θ̃^T_n‖∞`.
    pub fn max_sum_violation(&self) -> f64 {
        self.theta
            .iter()
            .zip(&self.theta_m)
            .zip(&self.theta_t)
            .map(|((t, m), tt)| (t - m - tt).amax())
            .fold(0.0, f64::max)
    }

    /// `max_{n≥1} ‖Ξ_n − θ̃^T_n − α_n Z_{n+1}‖∞`.
    pub fn max_tele_violation(&self) -> f64 {
        self.xi
            .iter()
            .enumerate()
            .map(|(k, xi)| {
                let n = k + 1;
                let alpha = self.gain / n as f64;
                (xi - &self.theta_t[n] - &self.z_path[n + 1] * alpha).amax()
            })
            .fold(0.0, f64::max)
    }

    /// `θ̃^{(3)}_n = −α_n Z_{n+1}` for `n ≥ 1`.
    pub fn theta_3(&self, n: usize) -> DVector<f64> {
        &self.z_path[n + 1] * (-self.gain / n as f64)
    }
}

/// Run `θ̃`, `θ̃^M`, `θ̃^T` and `Ξ` side by side over `horizon` steps. The path
/// must hold `Φ_0..=Φ_{horizon+1}` because `θ̃^M_{n+1}` uses `Δ^m_{n+2}`.
///
/// For general gain `g` the telescoping recursion reads
/// `Ξ_{n+1} = Ξ_n + α_{n+1}[AΞ_n − α_n(I/g + A)Z_{n+1}]`, `Ξ_1 = gZ_1`.
pub fn run_decomposition(
    problem: &LinearSAProblem,
    chain: &FiniteChain,
    poisson: &PoissonSolution,
    path: &[usize],
    horizon: usize,
) -> Result<DecompositionTrace> {
    check_path(path, horizon, 1)?;
    let d = problem.dim();
    if poisson.fhat.dim() != d || poisson.fhat.num_states() != chain.num_states() {
        return Err(Error::Dimension("Poisson solution does not match the problem".into()));
    }
    let resid = poisson.fhat.values() - chain.transition() * poisson.fhat.values() - problem.noise.values();
    let scale = linalg::max_abs(poisson.fhat.values()).max(1.0);
    if resid.amax() > 1e-10 * scale {
        return Err(Error::InvalidInput(format!(
            "f̂ does not solve Poisson's equation for f* (residual {:e})",
            resid.amax()
        )));
    }
    let incs = poisson.martingale_increments(chain);
    let noise = rows_of(&problem.noise);
    let g = problem.gain;
    let a = &problem.a;
    let eye = DMatrix::<f64>::identity(d, d);
    let tele_gain = &eye / g + a;

    let z_path: Vec<DVector<f64>> = path[..horizon + 2].iter().map(|&z| incs.fhat_at(z)).collect();
    let mut theta = vec![problem.theta0.clone()];
    let mut theta_m = vec![problem.theta0.clone()];
    let mut theta_t = vec![DVector::zeros(d)];
    let mut xi = Vec::with_capacity(horizon);
    if horizon >= 1 {
        xi.push(&z_path[1] * g);
    }
    for n in 0..horizon {
        let alpha = g / (n + 1) as f64;
        let t = &theta[n];
        theta.push(t + (a * t + &noise[path[n + 1]]) * alpha);
        let m = &theta_m[n];
        theta_m.push(m + (a * m + incs.at(path[n + 1], path[n + 2])) * alpha);
        let tt = &theta_t[n];
        theta_t.push(tt + (a * tt + &z_path[n + 1] - &z_path[n + 2]) * alpha);
        if n >= 1 && n < horizon {
            let prev = &xi[n - 1];
            let alpha_n = g / n as f64;
            let next = prev + (a * prev - &tele_gain * &z_path[n + 1] * alpha_n) * alpha;
            xi.push(next);
        }
    }
    Ok(DecompositionTrace {
        theta,
        theta_m,
        theta_t,
        xi,
        z_path,
        gain: g,
    })
}

#[derive(Debug, Clone)]
pub struct CouplingTrace {
    /// `θ̃°`: random-matrix recursion.
    pub theta_circ: Trajectory,
    /// `θ̃•`: mean-matrix recursion with the same additive noise and path.
    pub theta_bullet: Trajectory,
    /// `ℰ_n` from its own recursion
    /// `ℰ_{n+1} = ℰ_n + α_{n+1}[𝒜_{n+1}ℰ_n + (𝒜_{n+1} − A)θ̃•_n]`, `ℰ_0 = 0`.
    pub err: Trajectory,
}

impl CouplingTrace {
    /// `max ‖ℰ_n − (θ̃°_n − θ̃•_n)‖∞` over checkpoints.
    pub fn max_identity_violation(&self) -> f64 {
        self.err
            .checkpoints
            .iter()
            .zip(&self.theta_circ.checkpoints)
            .zip(&self.theta_bullet.checkpoints)
            .map(|(((_, e), (_, c)), (_, b))| (e - (c - b)).amax())
            .fold(0.0, f64::max)
    }
}

pub fn run_coupled(
    problem: &RandomLinearSAProblem,
    path: &[usize],
    checkpoints: &Checkpoints,
) -> Result<CouplingTrace> {
    let horizon = checkpoints.horizon();
    check_path(path, horizon, 0)?;
    let d = problem.dim();
    let drive = problem.drive();
    let mean_a = problem.mean_matrix();
    let mut circ = problem.theta0.clone();
    let mut bullet = problem.theta0.clone();
    let mut err = DVector::zeros(d);
    let mut tmp = DVector::zeros(d);
    let mut rc = Recorder::new(checkpoints);
    let mut rb = Recorder::new(checkpoints);
    let mut re = Recorder::new(checkpoints);
    rc.record(0, &circ);
    rb.record(0, &bullet);
    re.record(0, &err);
    for n in 0..horizon {
        let z = path[n + 1];
        let alpha = problem.gain / (n + 1) as f64;
        let az = &problem.amap[z];
        // ℰ uses θ̃•_n, so it advances first.
        tmp.gemv(1.0, az, &err, 0.0);
        tmp.gemv(1.0, az, &bullet, 1.0);
        tmp.gemv(-1.0, mean_a, &bullet, 1.0);
        err.axpy(alpha, &tmp, 1.0);

        tmp.gemv(1.0, az, &circ, 0.0);
        tmp += &drive[z];
        circ.axpy(alpha, &tmp, 1.0);

        tmp.gemv(1.0, mean_a, &bullet, 0.0);
        tmp += &drive[z];
        bullet.axpy(alpha, &tmp, 1.0);

        rc.record(n + 1, &circ);
        rb.record(n + 1, &bullet);
        re.record(n + 1, &err);
    }
    Ok(CouplingTrace {
        theta_circ: rc.finish(),
        theta_bullet: rb.finish(),
        err: re.finish(),
    })
}
