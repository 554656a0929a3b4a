//! Markov noise models: finite chains, the uniformized M/M/1 queue, and
//! seeded path samplers.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::linalg;
use crate::{Error, Result};

const ROW_SUM_TOL: f64 = 1e-12;
const STATIONARY_RESIDUAL_TOL: f64 = 1e-12;

/// Anything that can advance a state index one step using a caller-owned RNG.
pub trait MarkovModel: Sync {
    fn next_state<R: Rng + ?Sized>(&self, state: usize, rng: &mut R) -> usize;
}

/// Finite-state chain with row-stochastic transition matrix `P(z, z')`.
#[derive(Debug, Clone)]
pub struct FiniteChain {
    transition: DMatrix<f64>,
    cumulative: Vec<Vec<f64>>,
}

impl FiniteChain {
    pub fn new(transition: DMatrix<f64>) -> Result<Self> {
        let s = transition.nrows();
        if s == 0 || transition.ncols() != s {
            return Err(Error::InvalidChain(format!(
                "transition matrix must be square and non-empty, got {}x{}",
                s,
                transition.ncols()
            )));
        }
        for z in 0..s {
            let mut sum = 0.0;
            for w in 0..s {
                let p = transition[(z, w)];
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::InvalidChain(format!(
                        "entry ({z}, {w}) = {p} is not a probability"
                    )));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::InvalidChain(format!("row {z} sums to {sum}")));
            }
        }
        let cumulative = (0..s)
            .map(|z| {
                let mut acc = 0.0;
                (0..s)
                    .map(|w| {
                        acc += transition[(z, w)];
                        acc
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            transition,
            cumulative,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(linalg::matrix_from_rows(rows)?)
    }

    pub fn num_states(&self) -> usize {
        self.transition.nrows()
    }

    pub fn transition(&self) -> &DMatrix<f64> {
        &self.transition
    }

    pub fn prob(&self, from: usize, to: usize) -> f64 {
        self.transition[(from, to)]
    }
}

impl MarkovModel for FiniteChain {
    fn next_state<R: Rng + ?Sized>(&self, state: usize, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let row = &self.cumulative[state];
        // Zero-probability targets are never selected: ties resolve to the
        // first index whose cumulative mass strictly exceeds u.
        row.iter()
            .position(|&c| u < c)
            .unwrap_or_else(|| last_positive(&self.transition, state))
    }
}

fn last_positive(p: &DMatrix<f64>, row: usize) -> usize {
    (0..p.ncols()).rev().find(|&w| p[(row, w)] > 0.0).unwrap_or(row)
}

/// Draw an index from a probability vector with a single uniform.
pub fn sample_index<R: Rng + ?Sized>(probs: &DVector<f64>, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    (0..probs.len()).rev().find(|&i| probs[i] > 0.0).unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErgodicityReport {
    pub irreducible: bool,
    pub aperiodic: bool,
    /// Communicating classes, each sorted, ordered by smallest member.
    pub classes: Vec<Vec<usize>>,
    /// Period of each class (0 for a transient singleton without a self-loop).
    pub periods: Vec<usize>,
    /// Which classes are closed.
    pub closed: Vec<bool>,
    /// |λ₂(P)|, a mixing-rate proxy.
    pub second_eigenvalue_modulus: f64,
}

impl ErgodicityReport {
    pub fn is_ergodic(&self) -> bool {
        self.irreducible && self.aperiodic
    }

    fn describe(&self) -> String {
        if !self.irreducible {
            let parts: Vec<String> = self
                .classes
                .iter()
                .zip(&self.closed)
                .map(|(c, closed)| {
                    format!("{:?}{}", c, if *closed { " (closed)" } else { "" })
                })
                .collect();
            format!(
                "reducible: {} communicating classes {}",
                self.classes.len(),
                parts.join(", ")
            )
        } else {
            format!(
                "periodic: class {:?} has period {}",
                self.classes[0], self.periods[0]
            )
        }
    }
}

/// Irreducibility by strongly connected components of the support digraph,
/// aperiodicity by the gcd of cycle lengths inside each class.
pub fn ergodicity_check(chain: &FiniteChain) -> ErgodicityReport {
    let s = chain.num_states();
    let adj: Vec<Vec<usize>> = (0..s)
        .map(|z| (0..s).filter(|&w| chain.prob(z, w) > 0.0).collect())
        .collect();
    let classes = strongly_connected(&adj);
    let mut class_of = vec![0usize; s];
    for (k, c) in classes.iter().enumerate() {
        for &z in c {
            class_of[z] = k;
        }
    }
    let closed: Vec<bool> = classes
        .iter()
        .enumerate()
        .map(|(k, c)| c.iter().all(|&z| adj[z].iter().all(|&w| class_of[w] == k)))
        .collect();
    let periods: Vec<usize> = classes
        .iter()
        .enumerate()
        .map(|(k, c)| class_period(&adj, &class_of, k, c[0], s))
        .collect();

    let irreducible = classes.len() == 1;
    let aperiodic = classes
        .iter()
        .enumerate()
        .filter(|(k, _)| closed[*k])
        .all(|(k, _)| periods[k] == 1);

    let mut moduli: Vec<f64> = linalg::eigenvalues(chain.transition())
        .iter()
        .map(|l| l.norm())
        .collect();
    moduli.sort_by(|a, b| b.total_cmp(a));
    let second_eigenvalue_modulus = moduli.get(1).copied().unwrap_or(0.0);

    ErgodicityReport {
        irreducible,
        aperiodic,
        classes,
        periods,
        closed,
        second_eigenvalue_modulus,
    }
}

fn strongly_connected(adj: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let s = adj.len();
    let reach = |start: usize, forward: bool| -> Vec<bool> {
        let mut seen = vec![false; s];
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(z) = stack.pop() {
            let next: Vec<usize> = if forward {
                adj[z].clone()
            } else {
                (0..s).filter(|&w| adj[w].contains(&z)).collect()
            };
            for w in next {
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        seen
    };
    let mut assigned = vec![false; s];
    let mut classes = Vec::new();
    for z in 0..s {
        if assigned[z] {
            continue;
        }
        let fwd = reach(z, true);
        let bwd = reach(z, false);
        let class: Vec<usize> = (0..s).filter(|&w| fwd[w] && bwd[w]).collect();
        for &w in &class {
            assigned[w] = true;
        }
        classes.push(class);
    }
    classes
}

fn class_period(adj: &[Vec<usize>], class_of: &[usize], k: usize, root: usize, s: usize) -> usize {
    let mut level = vec![usize::MAX; s];
    level[root] = 0;
    let mut queue = std::collections::VecDeque::from([root]);
    let mut g = 0usize;
    while let Some(z) = queue.pop_front() {
        for &w in &adj[z] {
            if class_of[w] != k {
                continue;
            }
            if level[w] == usize::MAX {
                level[w] = level[z] + 1;
                queue.push_back(w);
            } else {
                g = gcd(g, (level[z] + 1).abs_diff(level[w]));
            }
        }
    }
    g
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Unique invariant distribution from `(Pᵀ − I) π = 0` with one equation
/// replaced by the normalization `Σ π = 1`.
pub fn stationary_dist(chain: &FiniteChain) -> Result<DVector<f64>> {
    let report = ergodicity_check(chain);
    if !report.is_ergodic() {
        return Err(Error::Ergodicity(report.describe()));
    }
    let s = chain.num_states();
    let mut system = chain.transition().transpose() - DMatrix::identity(s, s);
    for j in 0..s {
        system[(s - 1, j)] = 1.0;
    }
    let mut rhs = DVector::zeros(s);
    rhs[s - 1] = 1.0;
    let mut pi = linalg::solve_vec(&system, &rhs, "stationary system")?;
    // One refinement sweep: π ← πP, renormalized.
    pi = (chain.transition().transpose() * &pi).map(|v| v.max(0.0));
    let total = pi.sum();
    pi /= total;
    let residual = stationary_residual(chain, &pi);
    if residual > STATIONARY_RESIDUAL_TOL {
        return Err(Error::Singular(format!(
            "stationary residual {residual:e} above {STATIONARY_RESIDUAL_TOL:e}"
        )));
    }
    Ok(pi)
}

/// `‖πP − π‖∞`.
pub fn stationary_residual(chain: &FiniteChain, pi: &DVector<f64>) -> f64 {
    let moved = chain.transition().transpose() * pi;
    (moved - pi).amax()
}

/// Uniformized M/M/1 queue: up one level w.p. `p_a`, otherwise down one level
/// reflected at zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QueueChain {
    pub arrival_prob: f64,
    pub service_prob: f64,
    pub load: f64,
    pub analysis_truncation: usize,
}

impl QueueChain {
    /// Accepts any `p_a ∈ [0, 1)`; analysis operations reject `ρ_q ≥ 1`.
    pub fn new(arrival_prob: f64, analysis_truncation: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&arrival_prob) {
            return Err(Error::InvalidChain(format!(
                "arrival probability {arrival_prob} outside [0, 1)"
            )));
        }
        let service_prob = 1.0 - arrival_prob;
        Ok(Self {
            arrival_prob,
            service_prob,
            load: arrival_prob / service_prob,
            analysis_truncation,
        })
    }

    pub fn is_stable(&self) -> bool {
        self.load < 1.0
    }

    pub(crate) fn require_stable(&self) -> Result<()> {
        if self.is_stable() {
            Ok(())
        } else {
            Err(Error::Stability(format!(
                "queue load ρ = {} is not below 1",
                self.load
            )))
        }
    }

    /// Stationary mass strictly above `level`: `ρ^{level+1}`.
    pub fn tail_mass(&self, level: usize) -> f64 {
        self.load.powi(level as i32 + 1)
    }

    /// Finite section on `0..=level` with a reflecting (self-loop) boundary.
    pub fn truncated_chain(&self, level: usize) -> Result<FiniteChain> {
        let s = level + 1;
        let mut p = DMatrix::zeros(s, s);
        for z in 0..s {
            p[(z, (z + 1).min(level))] += self.arrival_prob;
            p[(z, z.saturating_sub(1))] += self.service_prob;
        }
        FiniteChain::new(p)
    }

    /// Exact draw from the geometric invariant law.
    pub fn sample_stationary<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<usize> {
        self.require_stable()?;
        let mut z = 0usize;
        while rng.random::<f64>() < self.load {
            z += 1;
        }
        Ok(z)
    }
}

impl MarkovModel for QueueChain {
    fn next_state<R: Rng + ?Sized>(&self, state: usize, rng: &mut R) -> usize {
        if rng.random::<f64>() < self.arrival_prob {
            state + 1
        } else {
            state.saturating_sub(1)
        }
    }
}

/// `π(z) = (1 − ρ) ρ^z`.
pub fn mm1_stationary(queue: &QueueChain, level: usize) -> Result<f64> {
    queue.require_stable()?;
    Ok((1.0 - queue.load) * queue.load.powi(level as i32))
}

/// Deterministic path generator; one per trial.
#[derive(Debug, Clone)]
pub struct ChainSampler<'a, M> {
    model: &'a M,
    state: usize,
    rng: ChaCha8Rng,
}

impl<'a, M: MarkovModel> ChainSampler<'a, M> {
    pub fn new(model: &'a M, seed: u64, initial_state: usize) -> Self {
        Self {
            model,
            state: initial_state,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn state(&self) -> usize {
        self.state
    }

    pub fn set_state(&mut self, state: usize) {
        self.state = state;
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn step(&mut self) -> usize {
        self.state = self.model.next_state(self.state, &mut self.rng);
        self.state
    }

    /// `Φ_0 ..= Φ_n`, starting from the current state.
    pub fn sample_path(&mut self, n: usize) -> Vec<usize> {
        let mut path = Vec::with_capacity(n + 1);
        path.push(self.state);
        for _ in 0..n {
            path.push(self.step());
        }
        path
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn two_state(p: f64, q: f64) -> FiniteChain {
        FiniteChain::from_rows(&[vec![1.0 - p, p], vec![q, 1.0 - q]]).unwrap()
    }

    #[test]
    fn rejects_bad_rows() {
        assert!(FiniteChain::from_rows(&[vec![0.5, 0.6], vec![0.5, 0.5]]).is_err());
        assert!(FiniteChain::from_rows(&[vec![1.5, -0.5], vec![0.5, 0.5]]).is_err());
    }

    #[test]
    fn stationary_symmetric() {
        let pi = stationary_dist(&two_state(0.5, 0.5)).unwrap();
        assert_abs_diff_eq!(pi[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(pi[1], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn stationary_asymmetric() {
        let chain = two_state(0.25, 0.125);
        let pi = stationary_dist(&chain).unwrap();
        assert_abs_diff_eq!(pi[0], 1.0 / 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(pi[1], 2.0 / 3.0, epsilon = 1e-14);
        assert!(stationary_residual(&chain, &pi) <= 1e-12);
    }

    #[test]
    fn identity_is_reducible() {
        let chain = FiniteChain::new(DMatrix::identity(3, 3)).unwrap();
        match stationary_dist(&chain) {
            Err(Error::Ergodicity(msg)) => assert!(msg.contains("3 communicating classes"), "{msg}"),
            other => panic!("expected ergodicity error, got {other:?}"),
        }
    }

    #[test]
    fn flip_is_periodic() {
        let chain = two_state(1.0, 1.0);
        let report = ergodicity_check(&chain);
        assert!(report.irreducible);
        assert!(!report.aperiodic);
        assert_eq!(report.periods, vec![2]);
        assert!(matches!(stationary_dist(&chain), Err(Error::Ergodicity(_))));
    }

    #[test]
    fn second_eigenvalue_moduli() {
        assert_abs_diff_eq!(ergodicity_check(&two_state(0.5, 0.5)).second_eigenvalue_modulus, 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(ergodicity_check(&two_state(0.25, 0.25)).second_eigenvalue_modulus, 0.5, epsilon = 1e-14);
    }

    #[test]
    fn transient_state_is_reducible() {
        let chain =
            FiniteChain::from_rows(&[vec![0.0, 1.0, 0.0], vec![0.0, 0.5, 0.5], vec![0.0, 0.5, 0.5]])
                .unwrap();
        let report = ergodicity_check(&chain);
        assert!(!report.irreducible);
        assert_eq!(report.classes, vec![vec![0], vec![1, 2]]);
        assert_eq!(report.closed, vec![false, true]);
    }

    #[test]
    fn mm1_geometric_law() {
        let half = QueueChain::new(1.0 / 3.0, 10).unwrap();
        assert_abs_diff_eq!(half.load, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(mm1_stationary(&half, 0).unwrap(), 0.5, epsilon = 1e-15);
        let q = QueueChain::new(0.8 / 1.8, 10).unwrap();
        assert_abs_diff_eq!(mm1_stationary(&q, 2).unwrap(), 0.128, epsilon = 1e-14);
        let empty = QueueChain::new(0.0, 10).unwrap();
        assert_abs_diff_eq!(mm1_stationary(&empty, 0).unwrap(), 1.0, epsilon = 0.0);
        let unstable = QueueChain::new(0.5, 10).unwrap();
        assert!(matches!(mm1_stationary(&unstable, 0), Err(Error::Stability(_))));
    }

    #[test]
    fn truncated_queue_is_stochastic_and_ergodic() {
        let q = QueueChain::new(1.0 / 3.0, 10).unwrap();
        let chain = q.truncated_chain(10).unwrap();
        let pi = stationary_dist(&chain).unwrap();
        // Truncated law is the geometric law renormalized on 0..=N.
        let norm = 1.0 - q.tail_mass(10);
        for z in 0..=10 {
            assert_abs_diff_eq!(pi[z], mm1_stationary(&q, z).unwrap() / norm, epsilon = 1e-13);
        }
    }

    #[test]
    fn path_shape_and_determinism() {
        let chain = two_state(0.25, 0.125);
        let mut s = ChainSampler::new(&chain, 7, 1);
        assert_eq!(s.sample_path(0), vec![1]);
        let a = ChainSampler::new(&chain, 42, 0).sample_path(1000);
        let b = ChainSampler::new(&chain, 42, 0).sample_path(1000);
        assert_eq!(a, b);
        let c = ChainSampler::new(&chain, 43, 0).sample_path(1000);
        assert_ne!(a, c);
        for w in a.windows(2) {
            assert!(chain.prob(w[0], w[1]) > 0.0);
        }
    }

    #[test]
    fn queue_path_moves_by_one() {
        let q = QueueChain::new(0.3, 0).unwrap();
        let path = ChainSampler::new(&q, 1, 0).sample_path(10_000);
        for w in path.windows(2) {
            assert!(w[1] == w[0] + 1 || w[1] + 1 == w[0] || (w[0] == 0 && w[1] == 0));
        }
    }
}
