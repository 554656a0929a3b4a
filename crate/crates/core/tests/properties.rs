use nalgebra::{DMatrix, DVector};

use markov_sa::chain::{self, FiniteChain};
use markov_sa::covtheory::{self, CovariancePrediction};
use markov_sa::engine::{self, Checkpoints, LinearSAProblem, RandomLinearSAProblem, TDProblem};
use markov_sa::harness::{self, EnsembleSpec, InitialState, LinearSAExperiment, RandomLinearExperiment, RandomLinearStat};
use markov_sa::oracle::{self, MomentState};
use markov_sa::poisson::{self, StateFunction};

fn two_state() -> FiniteChain {
    FiniteChain::from_rows(&[vec![0.75, 0.25], vec![0.25, 0.75]]).unwrap()
}

fn noise() -> StateFunction {
    StateFunction::scalar(&[1.0, -1.0]).unwrap()
}

fn scalar_problem(a: f64) -> LinearSAProblem {
    LinearSAProblem::new(DMatrix::from_element(1, 1, a), noise(), 1.0, DVector::zeros(1)).unwrap()
}

fn stationary(chain: &FiniteChain, d: usize) -> MomentState {
    MomentState::point_mass(&chain::stationary_dist(chain).unwrap(), &DVector::zeros(d)).unwrap()
}

#[test]
fn oracle_trace_rate_when_half_condition_fails() {
    let chain = two_state();
    let cps = Checkpoints::default_geometric(100_000);
    let run = oracle::propagate_linear(&chain, &scalar_problem(-0.3), &stationary(&chain, 1), &cps, None).unwrap();
    let ns: Vec<usize> = run.points.iter().map(|p| p.n).collect();
    let tr: Vec<f64> = run.points.iter().map(|p| p.trace_cov()).collect();
    let fit = harness::fit_rate(&ns, &tr, Some((1_000, 100_000))).unwrap();
    assert!((fit.exponent + 0.6).abs() <= 0.05, "{fit:?}");
}

#[test]
fn scaled_moment_grows_beyond_rho0() {
    // ρ = 0.35 > ρ₀ = 0.3: n^{2ρ} E|vᵀθ̃_n|² must grow.
    let chain = two_state();
    let a = DMatrix::from_element(1, 1, -0.3);
    let report = covtheory::eigen_report(&a, &poisson::noise_stats(&chain, &noise()).unwrap().sigma_delta).unwrap();
    let cps = Checkpoints::default_geometric(100_000);
    let run = oracle::propagate_linear(&chain, &scalar_problem(-0.3), &stationary(&chain, 1), &cps, None).unwrap();
    let ns: Vec<usize> = run.points.iter().map(|p| p.n).collect();
    let scaled: Vec<f64> = run
        .points
        .iter()
        .map(|p| (p.n as f64).powf(0.7) * report.projected_moment(&p.second_moment))
        .collect();
    let fit = harness::fit_rate(&ns, &scaled, Some((1_000, 100_000))).unwrap();
    assert!(fit.exponent > 0.0, "{fit:?}");
}

#[test]
fn second_order_matches_oracle_in_two_dimensions() {
    let chain = FiniteChain::from_rows(&[vec![0.5, 0.3, 0.2], vec![0.1, 0.6, 0.3], vec![0.4, 0.2, 0.4]]).unwrap();
    let f = StateFunction::from_rows(&[vec![1.0, 0.0], vec![-0.5, 1.0], vec![0.2, -2.0]]).unwrap();
    let a = DMatrix::from_row_slice(2, 2, &[-2.0, 0.5, -0.3, -1.6]);
    let stats = poisson::noise_stats(&chain, &f).unwrap();
    let pred = CovariancePrediction::new(&a, &stats, 1.0).unwrap();
    let st = pred.sigma_theta.clone().unwrap();
    let s2 = pred.second_order.clone().unwrap().sigma_theta_2;
    let centred = poisson::center(&f, &chain::stationary_dist(&chain).unwrap()).unwrap();
    let problem = LinearSAProblem::new(a, centred, 1.0, DVector::zeros(2)).unwrap();
    let run = oracle::propagate_linear(&chain, &problem, &stationary(&chain, 2), &Checkpoints::new(vec![20_000, 40_000]).unwrap(), None).unwrap();
    for p in &run.points {
        let n = p.n as f64;
        let est = (&p.cov - &st / n) * (n * n);
        assert!((&est - &s2).amax() <= 0.02 * s2.amax().max(1.0), "n = {}: {est} vs {s2}", p.n);
    }
}

#[test]
fn mcmc_average_matches_theory() {
    let chain = two_state();
    let exp = LinearSAExperiment::new(chain.clone(), scalar_problem(-1.0), InitialState::Stationary).unwrap();
    let spec = EnsembleSpec::new(10_000, Checkpoints::new(vec![1_000, 10_000]).unwrap(), 123).unwrap();
    let emp = harness::run_ensemble(&spec, &exp).unwrap();
    let stats = poisson::noise_stats(&chain, &noise()).unwrap();
    let pred = CovariancePrediction::new(&DMatrix::from_element(1, 1, -1.0), &stats, 1.0).unwrap();
    let report = harness::compare_to_theory(&emp, &pred, harness::DEFAULT_BAND).unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn coupling_rate_below_one() {
    // 𝒜 ∈ {−1.0, −0.6}: ρ₀ = 0.8, so E‖ℰ_n‖² decays at least like n^{−2ρ} for ρ < 0.8.
    let chain = two_state();
    let problem = RandomLinearSAProblem::new(
        &chain,
        vec![DMatrix::from_element(1, 1, -1.0), DMatrix::from_element(1, 1, -0.6)],
        vec![DVector::from_element(1, -2.0), DVector::from_element(1, 0.4)],
        DVector::from_element(1, 1.0),
        DVector::zeros(1),
    )
    .unwrap();
    let exp = RandomLinearExperiment::new(chain, problem, InitialState::Stationary, RandomLinearStat::Coupling).unwrap();
    let spec = EnsembleSpec::new(2_000, Checkpoints::default_geometric(10_000), 5).unwrap();
    let emp = harness::run_ensemble(&spec, &exp).unwrap();
    let ns: Vec<usize> = emp.points.iter().map(|p| p.n).collect();
    let msq: Vec<f64> = emp.points.iter().map(|p| p.second_moment.trace()).collect();
    let fit = harness::fit_rate(&ns, &msq, Some((1_000, 10_000))).unwrap();
    assert!(fit.exponent <= -2.0 * 0.75 + 0.1, "{fit:?}");
}

#[test]
fn td_ensemble_matches_pair_chain_oracle() {
    let chain = FiniteChain::from_rows(&[vec![0.5, 0.3, 0.2], vec![0.1, 0.6, 0.3], vec![0.4, 0.2, 0.4]]).unwrap();
    let basis = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.5, 1.0, 0.0, 1.0]);
    let td = TDProblem::new(chain, vec![1.0, -0.5, 2.0], 0.5, basis).unwrap();
    let m = engine::td_matrices(&td, &DVector::from_vec(vec![0.5, -0.5])).unwrap();
    let start = m.pairs.entry_pair(0);
    let mut phi0 = DVector::zeros(m.pairs.num_pairs());
    phi0[start] = 1.0;
    let cps = Checkpoints::geometric(1_000, 2.0);
    let init = MomentState::point_mass(&phi0, &m.random.theta0).unwrap();
    let run = oracle::propagate_random_linear(&m.pairs.chain, &m.random, &init, &cps, None).unwrap();
    let exp = RandomLinearExperiment::new(m.pairs.chain.clone(), m.random.clone(), InitialState::Fixed(start), RandomLinearStat::Error).unwrap();
    let emp = harness::run_ensemble(&EnsembleSpec::new(4_000, cps, 99).unwrap(), &exp).unwrap();
    let report = harness::compare_to_oracle(&emp, &run, harness::DEFAULT_BAND).unwrap();
    let bad: Vec<_> = report.rows.iter().filter(|r| r.z.abs() > 4.0).collect();
    assert!(report.passed, "{bad:?}");
    for (e, o) in emp.points.iter().zip(&run.points) {
        for i in 0..2 {
            assert!((e.mean[i] - o.mean[i]).abs() <= 4.0 * e.mean_se[i] + 1e-12);
        }
    }
}

#[test]
fn td_discount_near_one_degrades() {
    let chain = FiniteChain::from_rows(&[vec![0.5, 0.3, 0.2], vec![0.1, 0.6, 0.3], vec![0.4, 0.2, 0.4]]).unwrap();
    let td = TDProblem::new(chain, vec![1.0, -0.5, 2.0], 0.9, DMatrix::from_element(3, 1, 1.0)).unwrap();
    let m = engine::td_matrices(&td, &DVector::zeros(1)).unwrap();
    let report = covtheory::eigen_report(&m.a, &DMatrix::from_element(1, 1, 1.0)).unwrap();
    assert!((report.leading_eigenvalue.0 + 0.1).abs() <= 1e-14);
    assert!(!report.half_condition);
}
