//! JSON-configured experiment runner behind the `markov-sa` binary.
//!
//! Every run writes `summary.json` and `trajectory.csv` (plus `tails.csv` for
//! tail runs) to the output directory. Exit codes: 0 when every gating
//! comparison passed, 2 when one failed, 1 on any execution error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Parser;
use nalgebra::{DMatrix, DVector};
use serde::Deserialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::chain::{self, FiniteChain, QueueChain};
use crate::covtheory::{self, CovariancePrediction, PredictedCovariance};
use crate::engine::{self, Checkpoints, LinearSAProblem, RandomLinearSAProblem, TDProblem};
use crate::harness::{
    self, EmpiricalMoments, EnsembleSpec, Experiment, InitialState, LinearSAExperiment, QueueMeanExperiment,
    RandomLinearExperiment, RandomLinearStat,
};
use crate::linalg::{matrix_from_rows, matrix_to_rows};
use crate::oracle::{self, MomentState, OracleRun};
use crate::poisson::{self, StateFunction};
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_FAILED: i32 = 2;

pub const TRAJECTORY_HEADER: &str = "n,source,stat,row,col,value";
pub const TAILS_HEADER: &str = "epsilon,side,count,trials";

#[derive(Debug, Parser)]
#[command(name = "markov-sa", version, about = "Covariance theory, exact oracle and Monte Carlo for linear SA with Markov noise")]
pub struct Cli {
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory [default: ./out, or `out_dir` from the config].
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Worker threads; outputs do not depend on this [default: all cores].
    #[arg(long)]
    pub threads: Option<usize>,
    /// Overrides `master_seed` from the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Theory,
    Simulate,
    Oracle,
    Compare,
    Couple,
    Td,
    Tails,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::Theory => "theory",
            Kind::Simulate => "simulate",
            Kind::Oracle => "oracle",
            Kind::Compare => "compare",
            Kind::Couple => "couple",
            Kind::Td => "td",
            Kind::Tails => "tails",
        }
    }

    pub fn needs_seed(self) -> bool {
        !matches!(self, Kind::Theory | Kind::Oracle)
    }

    fn needs_trials(self) -> bool {
        matches!(self, Kind::Simulate | Kind::Compare | Kind::Couple | Kind::Tails)
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ChainSpec {
    Matrix(Vec<Vec<f64>>),
    Mm1(Mm1Spec),
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mm1Spec {
    pub arrival_prob: f64,
    #[serde(default = "default_truncation")]
    pub truncation: usize,
}

fn default_truncation() -> usize {
    200
}

/// Noise values: a flat list for `d = 1` or one row per state.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum NoiseSpec {
    Scalar(Vec<f64>),
    Rows(Vec<Vec<f64>>),
}

impl NoiseSpec {
    fn to_function(&self) -> Result<StateFunction> {
        match self {
            NoiseSpec::Scalar(v) => StateFunction::scalar(v),
            NoiseSpec::Rows(r) => StateFunction::from_rows(r),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitName {
    Stationary,
}

/// `"stationary"` or a fixed state index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(untagged)]
pub enum InitSpec {
    State(usize),
    Named(InitName),
}

impl Default for InitSpec {
    fn default() -> Self {
        InitSpec::Named(InitName::Stationary)
    }
}

impl InitSpec {
    fn initial_state(self) -> InitialState {
        match self {
            InitSpec::State(z) => InitialState::Fixed(z),
            InitSpec::Named(InitName::Stationary) => InitialState::Stationary,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomSpec {
    pub amap: Vec<Vec<Vec<f64>>>,
    pub bmap: Vec<Vec<f64>>,
    pub theta_star: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TdSpec {
    pub cost: Vec<f64>,
    pub discount: f64,
    pub basis: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    /// |z| band for oracle/theory comparisons.
    pub band: f64,
    /// Slack on coupling-rate exponents.
    pub coupling_slack: f64,
    /// `ρ < ρ₀` used for the coupling bound when `ρ₀ ≤ 1` [default 0.95 ρ₀].
    pub coupling_rho: Option<f64>,
    /// Rate-fit window `[n_lo, n_hi]` [default: last two decades].
    pub fit_window: Option<(usize, usize)>,
    pub td_equal: f64,
    pub snr_relative: f64,
    /// Ridge for ill-conditioned SNR gains.
    pub ridge: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            band: harness::DEFAULT_BAND,
            coupling_slack: 0.1,
            coupling_rho: None,
            fit_window: None,
            td_equal: 1e-12,
            snr_relative: 1e-10,
            ridge: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TailsSpec {
    /// Absolute thresholds; overrides `epsilon_sd`.
    pub epsilon: Option<Vec<f64>>,
    /// Thresholds as multiples of the sample standard deviation.
    pub epsilon_sd: Vec<f64>,
    pub bins: usize,
}

impl Default for TailsSpec {
    fn default() -> Self {
        Self {
            epsilon: None,
            epsilon_sd: vec![1.25, 1.5, 1.75, 2.0, 2.25],
            bins: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: Kind,
    pub chain: ChainSpec,
    #[serde(default)]
    pub noise: Option<NoiseSpec>,
    #[serde(default)]
    pub a: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub random: Option<RandomSpec>,
    #[serde(default)]
    pub td: Option<TdSpec>,
    #[serde(default = "default_gain")]
    pub gain: f64,
    /// `θ̃_0` (error coordinates); absolute `θ_0` for TD runs. Default zero.
    #[serde(default)]
    pub theta0: Option<Vec<f64>>,
    #[serde(default)]
    pub initial_state: InitSpec,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default)]
    pub checkpoints: Option<Vec<usize>>,
    #[serde(default)]
    pub checkpoint_ratio: Option<f64>,
    #[serde(default)]
    pub trials: Option<usize>,
    #[serde(default)]
    pub master_seed: Option<u64>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub tails: TailsSpec,
}

fn default_gain() -> f64 {
    1.0
}

fn default_horizon() -> usize {
    10_000
}

fn config_err(path: &str, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.to_string(),
        message: message.into(),
    }
}

fn at<T>(path: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| config_err(path, e.to_string()))
}

/// Finite-chain problem pieces shared by several kinds.
struct LinearSetup {
    chain: FiniteChain,
    pi: DVector<f64>,
    /// Noise centred under `π`.
    noise: StateFunction,
    noise_mean: DVector<f64>,
    a: DMatrix<f64>,
    theta0: DVector<f64>,
    gain: f64,
}

impl LinearSetup {
    fn problem(&self) -> Result<LinearSAProblem> {
        LinearSAProblem::new(self.a.clone(), self.noise.clone(), self.gain, self.theta0.clone())
    }

    fn phi0(&self, init: InitSpec) -> DVector<f64> {
        match init.initial_state() {
            InitialState::Stationary => self.pi.clone(),
            InitialState::Fixed(z) => {
                let mut e = DVector::zeros(self.pi.len());
                e[z] = 1.0;
                e
            }
        }
    }
}

impl ExperimentConfig {
    pub fn checkpoints(&self) -> Result<Checkpoints> {
        match &self.checkpoints {
            Some(list) => Checkpoints::new(list.clone()),
            None => Ok(match self.checkpoint_ratio {
                Some(r) => Checkpoints::geometric(self.horizon, r),
                None => Checkpoints::default_geometric(self.horizon),
            }),
        }
    }

    fn finite_chain(&self) -> Result<FiniteChain> {
        match &self.chain {
            ChainSpec::Matrix(rows) => at("chain.matrix", FiniteChain::from_rows(rows)),
            ChainSpec::Mm1(_) => Err(config_err(
                "chain",
                format!("{} runs need a finite transition matrix", self.kind.name()),
            )),
        }
    }

    fn queue(&self) -> Option<Result<QueueChain>> {
        match &self.chain {
            ChainSpec::Mm1(q) => Some(at("chain.mm1", QueueChain::new(q.arrival_prob, q.truncation))),
            ChainSpec::Matrix(_) => None,
        }
    }

    fn theta0(&self, d: usize) -> Result<DVector<f64>> {
        match &self.theta0 {
            None => Ok(DVector::zeros(d)),
            Some(v) if v.len() == d => Ok(DVector::from_column_slice(v)),
            Some(v) => Err(config_err("theta0", format!("expected {d} entries, got {}", v.len()))),
        }
    }

    fn linear_setup(&self) -> Result<LinearSetup> {
        let chain = self.finite_chain()?;
        let pi = at("chain.matrix", chain::stationary_dist(&chain))?;
        let raw = at(
            "noise",
            self.noise
                .as_ref()
                .ok_or_else(|| Error::InvalidInput(format!("{} runs need `noise`", self.kind.name())))?
                .to_function(),
        )?;
        if raw.num_states() != chain.num_states() {
            return Err(config_err(
                "noise",
                format!("{} rows for a {}-state chain", raw.num_states(), chain.num_states()),
            ));
        }
        let d = raw.dim();
        let a = at(
            "a",
            matrix_from_rows(
                self.a
                    .as_ref()
                    .ok_or_else(|| Error::InvalidInput(format!("{} runs need `a`", self.kind.name())))?,
            ),
        )?;
        if a.shape() != (d, d) {
            return Err(config_err("a", format!("expected {d}x{d}, got {:?}", a.shape())));
        }
        let noise_mean = raw.mean(&pi);
        let noise = at("noise", poisson::center(&raw, &pi))?;
        Ok(LinearSetup {
            chain,
            pi,
            noise,
            noise_mean,
            a,
            theta0: self.theta0(d)?,
            gain: self.gain,
        })
    }

    fn random_problem(&self) -> Result<(FiniteChain, RandomLinearSAProblem)> {
        let chain = self.finite_chain()?;
        let spec = self
            .random
            .as_ref()
            .ok_or_else(|| config_err("random", "couple runs need `random`"))?;
        let d = spec.theta_star.len();
        let amap = spec
            .amap
            .iter()
            .enumerate()
            .map(|(z, m)| {
                let m = at(&format!("random.amap[{z}]"), matrix_from_rows(m))?;
                if m.shape() != (d, d) {
                    return Err(config_err(&format!("random.amap[{z}]"), format!("expected {d}x{d}")));
                }
                Ok(m)
            })
            .collect::<Result<Vec<_>>>()?;
        let bmap = spec.bmap.iter().map(|b| DVector::from_column_slice(b)).collect();
        let problem = at(
            "random",
            RandomLinearSAProblem::new(
                &chain,
                amap,
                bmap,
                DVector::from_column_slice(&spec.theta_star),
                self.theta0(d)?,
            ),
        )?
        .with_gain(self.gain);
        Ok((chain, problem))
    }

    fn td_problem(&self) -> Result<TDProblem> {
        let chain = self.finite_chain()?;
        let spec = self.td.as_ref().ok_or_else(|| config_err("td", "td runs need `td`"))?;
        let basis = at("td.basis", matrix_from_rows(&spec.basis))?;
        at("td", TDProblem::new(chain, spec.cost.clone(), spec.discount, basis))
    }

    /// Kind-specific checks; run by [`parse_config`].
    pub fn validate(&self) -> Result<()> {
        if self.kind.needs_seed() && self.master_seed.is_none() {
            return Err(config_err(
                "master_seed",
                format!("master_seed is required for {} runs (no implicit randomness)", self.kind.name()),
            ));
        }
        if self.kind.needs_trials() && self.trials.is_none_or(|t| t < 2) {
            return Err(config_err("trials", format!("{} runs need trials >= 2", self.kind.name())));
        }
        if !(self.gain > 0.0) {
            return Err(config_err("gain", "gain must be positive"));
        }
        if self.checkpoint_ratio.is_some_and(|r| !(r > 1.0)) {
            return Err(config_err("checkpoint_ratio", "ratio must exceed 1"));
        }
        let cps = at("checkpoints", self.checkpoints())?;
        if cps.horizon() > self.horizon {
            return Err(config_err("checkpoints", "checkpoint beyond horizon"));
        }
        if let Some(q) = self.queue() {
            q?;
            if !matches!(self.kind, Kind::Simulate | Kind::Tails) {
                return Err(config_err(
                    "chain",
                    format!("the M/M/1 chain supports simulate and tails runs, not {}", self.kind.name()),
                ));
            }
            if self.theta0.is_some() || self.noise.is_some() || self.a.is_some() {
                return Err(config_err("chain", "M/M/1 runs average F(z) = z; drop noise, a and theta0"));
            }
            return Ok(());
        }
        let s = self.finite_chain()?.num_states();
        if let InitSpec::State(z) = self.initial_state {
            if z >= s {
                return Err(config_err("initial_state", format!("state {z} outside 0..{s}")));
            }
        }
        match self.kind {
            Kind::Couple => {
                self.random_problem()?;
            }
            Kind::Td => {
                let td = self.td_problem()?;
                self.theta0(td.dim())?;
            }
            _ => {
                self.linear_setup()?;
            }
        }
        Ok(())
    }
}

fn parse_raw(text: &str) -> Result<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        config_err(if path.is_empty() { "." } else { &path }, e.inner().to_string())
    })
}

/// Strict parse: unknown keys rejected, defaults filled, kind-specific
/// requirements checked.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    parse_config_with(text, None)
}

/// As [`parse_config`], with a seed override applied before validation.
pub fn parse_config_with(text: &str, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = parse_raw(text)?;
    if seed.is_some() {
        cfg.master_seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn config_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

struct CsvRow {
    n: usize,
    source: &'static str,
    stat: &'static str,
    row: usize,
    col: usize,
    value: f64,
}

#[derive(Default)]
struct Artifacts {
    rows: Vec<CsvRow>,
    tails: Option<harness::TailReport>,
}

impl Artifacts {
    fn push_vector(&mut self, n: usize, source: &'static str, stat: &'static str, v: &DVector<f64>) {
        for (i, &x) in v.iter().enumerate() {
            self.rows.push(CsvRow {
                n,
                source,
                stat,
                row: i,
                col: 0,
                value: x,
            });
        }
    }

    fn push_matrix(&mut self, n: usize, source: &'static str, stat: &'static str, m: &DMatrix<f64>) {
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                self.rows.push(CsvRow {
                    n,
                    source,
                    stat,
                    row: i,
                    col: j,
                    value: m[(i, j)],
                });
            }
        }
    }

    fn push_scalar(&mut self, n: usize, source: &'static str, stat: &'static str, value: f64) {
        self.rows.push(CsvRow {
            n,
            source,
            stat,
            row: 0,
            col: 0,
            value,
        });
    }

    fn push_oracle(&mut self, run: &OracleRun) {
        for p in &run.points {
            self.push_vector(p.n, "oracle", "mean", &p.mean);
            self.push_matrix(p.n, "oracle", "cov", &p.cov);
            self.push_scalar(p.n, "oracle", "trace_cov", p.trace_cov());
        }
    }

    fn push_empirical(&mut self, emp: &EmpiricalMoments) {
        for p in &emp.points {
            self.push_vector(p.n, "empirical", "mean", &p.mean);
            self.push_matrix(p.n, "empirical", "cov", &p.cov);
            self.push_scalar(p.n, "empirical", "trace_cov", p.trace_cov());
        }
    }

    fn push_theory(&mut self, pred: &CovariancePrediction, cps: &Checkpoints) {
        for &n in cps.indices() {
            if n == 0 {
                continue;
            }
            if let PredictedCovariance::Matrix(m) = pred.predicted_covariance(n) {
                self.push_matrix(n, "theory", "cov", &m);
                self.push_scalar(n, "theory", "trace_cov", m.trace());
            }
        }
    }
}

/// Fixed 17-significant-digit formatting.
fn fmt_num(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_trajectory(path: &Path, rows: &[CsvRow]) -> Result<()> {
    let mut out = String::with_capacity(64 * rows.len() + 32);
    out.push_str(TRAJECTORY_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{},{}", r.n, r.source, r.stat, r.row, r.col, fmt_num(r.value));
    }
    fs::write(path, out)?;
    Ok(())
}

fn write_tails(path: &Path, report: &harness::TailReport) -> Result<()> {
    let mut out = String::from(TAILS_HEADER);
    out.push('\n');
    for (k, &eps) in report.epsilon.iter().enumerate() {
        let _ = writeln!(out, "{},upper,{},{}", fmt_num(eps), report.upper_exceed[k], report.trials);
        let _ = writeln!(out, "{},lower,{},{}", fmt_num(eps), report.lower_exceed[k], report.trials);
    }
    fs::write(path, out)?;
    Ok(())
}

fn rows_json(m: &DMatrix<f64>) -> Value {
    json!(matrix_to_rows(m))
}

/// Theory section plus the prediction used for comparisons.
fn theory_section(setup: &LinearSetup) -> Result<(Value, CovariancePrediction)> {
    let analysis = poisson::analyze_noise(&setup.chain, &setup.noise)?;
    let pred = CovariancePrediction::new(&setup.a, &analysis.stats, setup.gain)?;
    let mut section = json!({
        "pi": setup.pi.as_slice(),
        "noise_mean_removed": setup.noise_mean.as_slice(),
        "noise_stats": analysis.stats,
        "poisson_residual": analysis.first.residual_norm,
        "prediction": pred,
        "rate_prediction": {
            "mean_square_exponent": pred.rate_exponent,
            "branch": if pred.report.half_condition { "optimal" } else { "degraded" },
        },
    });
    if !pred.report.half_condition {
        let rho0 = pred.report.rho0 / setup.gain;
        let grid: Vec<f64> = (1..=400).map(|k| k as f64 * 0.05 / rho0).collect();
        if let Ok(opt) = covtheory::optimal_scalar_gain(&setup.a, &analysis.stats.sigma_delta, &grid) {
            section["optimal_scalar_gain"] = json!(opt);
        }
    }
    Ok((section, pred))
}

fn rate_fit_json(ns: &[usize], values: &[f64], window: Option<(usize, usize)>) -> Value {
    match harness::fit_rate(ns, values, window) {
        Ok(f) => json!(f),
        Err(e) => json!({ "error": e.to_string() }),
    }
}

fn oracle_section(run: &OracleRun, pred: &CovariancePrediction, window: Option<(usize, usize)>) -> Value {
    let ns: Vec<usize> = run.points.iter().map(|p| p.n).collect();
    let traces: Vec<f64> = run.points.iter().map(|p| p.trace_cov()).collect();
    let projected: Vec<f64> = run
        .points
        .iter()
        .map(|p| pred.report.projected_moment(&p.second_moment))
        .collect();
    let last = run.points.last();
    json!({
        "final_n": last.map(|p| p.n),
        "final_scaled_trace": last.map(|p| p.trace_cov() * p.n as f64),
        "final_cov": last.map(|p| rows_json(&p.cov)),
        "trace_rate_fit": rate_fit_json(&ns, &traces, window),
        "projected_moment_rate_fit": rate_fit_json(&ns, &projected, window),
    })
}

struct Outcome {
    summary: Value,
    passed: Option<bool>,
    artifacts: Artifacts,
}

fn run_theory(cfg: &ExperimentConfig) -> Result<Outcome> {
    let setup = cfg.linear_setup()?;
    let (section, pred) = theory_section(&setup)?;
    let mut artifacts = Artifacts::default();
    artifacts.push_theory(&pred, &cfg.checkpoints()?);
    Ok(Outcome {
        summary: json!({ "theory": section }),
        passed: None,
        artifacts,
    })
}

fn propagate(setup: &LinearSetup, cfg: &ExperimentConfig) -> Result<OracleRun> {
    let init = MomentState::point_mass(&setup.phi0(cfg.initial_state), &setup.theta0)?;
    oracle::propagate_linear(&setup.chain, &setup.problem()?, &init, &cfg.checkpoints()?, None)
}

fn run_oracle(cfg: &ExperimentConfig) -> Result<Outcome> {
    let setup = cfg.linear_setup()?;
    let (theory, pred) = theory_section(&setup)?;
    let run = propagate(&setup, cfg)?;
    let mut artifacts = Artifacts::default();
    artifacts.push_oracle(&run);
    artifacts.push_theory(&pred, &cfg.checkpoints()?);
    Ok(Outcome {
        summary: json!({
            "theory": theory,
            "oracle": oracle_section(&run, &pred, cfg.tolerances.fit_window),
        }),
        passed: None,
        artifacts,
    })
}

fn ensemble_spec(cfg: &ExperimentConfig) -> Result<EnsembleSpec> {
    EnsembleSpec::new(
        cfg.trials.unwrap_or(0),
        cfg.checkpoints()?,
        cfg.master_seed.expect("validated"),
    )
}

fn experiment(cfg: &ExperimentConfig) -> Result<Box<dyn Experiment>> {
    let init = cfg.initial_state.initial_state();
    if let Some(q) = cfg.queue() {
        return Ok(Box::new(QueueMeanExperiment::new(q?, init)?));
    }
    let setup = cfg.linear_setup()?;
    Ok(Box::new(LinearSAExperiment::new(setup.chain.clone(), setup.problem()?, init)?))
}

fn empirical_section(emp: &EmpiricalMoments) -> Value {
    let last = emp.points.last();
    json!({
        "trials": emp.trials,
        "final_n": last.map(|p| p.n),
        "final_mean": last.map(|p| p.mean.as_slice().to_vec()),
        "final_cov": last.map(|p| rows_json(&p.cov)),
        "final_scaled_trace": last.map(|p| p.trace_cov() * p.n as f64),
        "final_scaled_trace_se": last.map(|p| p.trace_cov_se * p.n as f64),
    })
}

fn run_simulate(cfg: &ExperimentConfig) -> Result<Outcome> {
    let exp = experiment(cfg)?;
    let emp = harness::run_ensemble(&ensemble_spec(cfg)?, exp.as_ref())?;
    let mut artifacts = Artifacts::default();
    artifacts.push_empirical(&emp);
    Ok(Outcome {
        summary: json!({ "empirical": empirical_section(&emp) }),
        passed: None,
        artifacts,
    })
}

fn run_compare(cfg: &ExperimentConfig) -> Result<Outcome> {
    let setup = cfg.linear_setup()?;
    let (theory, pred) = theory_section(&setup)?;
    let run = propagate(&setup, cfg)?;
    let exp = LinearSAExperiment::new(setup.chain.clone(), setup.problem()?, cfg.initial_state.initial_state())?;
    let emp = harness::run_ensemble(&ensemble_spec(cfg)?, &exp)?;
    let band = cfg.tolerances.band;
    let vs_oracle = harness::compare_to_oracle(&emp, &run, band)?;
    let vs_theory = harness::compare_to_theory(&emp, &pred, band)?;
    let mut artifacts = Artifacts::default();
    artifacts.push_oracle(&run);
    artifacts.push_empirical(&emp);
    artifacts.push_theory(&pred, &cfg.checkpoints()?);
    let passed = vs_oracle.passed;
    Ok(Outcome {
        summary: json!({
            "theory": theory,
            "oracle": oracle_section(&run, &pred, cfg.tolerances.fit_window),
            "empirical": empirical_section(&emp),
            "comparisons": {
                "empirical_vs_oracle": { "gating": true, "report": vs_oracle },
                "empirical_vs_theory": { "gating": false, "report": vs_theory },
            },
        }),
        passed: Some(passed),
        artifacts,
    })
}

fn run_couple(cfg: &ExperimentConfig) -> Result<Outcome> {
    let (chain, problem) = cfg.random_problem()?;
    let report = covtheory::eigen_report(&(problem.mean_matrix() * problem.gain), &DMatrix::zeros(problem.dim(), problem.dim()))?;
    let rho0 = report.rho0;
    let tol = &cfg.tolerances;
    let target = if rho0 > 1.0 {
        2.0
    } else {
        let rho = tol.coupling_rho.unwrap_or(0.95 * rho0);
        if !(rho < rho0) {
            return Err(config_err("tolerances.coupling_rho", format!("must be below ρ₀ = {rho0}")));
        }
        2.0 * rho
    };
    let exp = RandomLinearExperiment::new(chain, problem, cfg.initial_state.initial_state(), RandomLinearStat::Coupling)?;
    let emp = harness::run_ensemble(&ensemble_spec(cfg)?, &exp)?;
    let ns: Vec<usize> = emp.points.iter().map(|p| p.n).collect();
    let msq: Vec<f64> = emp.points.iter().map(|p| p.second_moment.trace()).collect();
    let mut artifacts = Artifacts::default();
    for (&n, &v) in ns.iter().zip(&msq) {
        artifacts.push_scalar(n, "empirical", "coupling_err", v);
    }
    let fit = harness::fit_rate(&ns, &msq, tol.fit_window);
    let (fit_json, passed) = match &fit {
        Ok(f) => (json!(f), f.exponent <= -target + tol.coupling_slack),
        Err(e) => (json!({ "error": e.to_string() }), false),
    };
    Ok(Outcome {
        summary: json!({
            "eigen_report": report,
            "coupling": {
                "mean_square_rate_fit": fit_json,
                "required_exponent_at_most": -target + tol.coupling_slack,
                "passed": passed,
            },
        }),
        passed: Some(passed),
        artifacts,
    })
}

fn run_td(cfg: &ExperimentConfig) -> Result<Outcome> {
    let td = cfg.td_problem()?;
    let theta0 = cfg.theta0(td.dim())?;
    let m = engine::td_matrices(&td, &theta0)?;
    let drive = m.random.drive();
    let drive_fn = StateFunction::new(DMatrix::from_fn(drive.len(), td.dim(), |z, i| drive[z][i]))?;
    let stats = poisson::noise_stats(&m.pairs.chain, &drive_fn)?;
    let pred = CovariancePrediction::new(&m.a, &stats, cfg.gain)?;

    let cps = cfg.checkpoints()?;
    let seed = cfg.master_seed.expect("validated");
    let start = match cfg.initial_state.initial_state() {
        InitialState::Fixed(z) => z,
        InitialState::Stationary => {
            let pi = chain::stationary_dist(&td.chain)?;
            let mut sampler = chain::ChainSampler::new(&td.chain, seed, 0);
            chain::sample_index(&pi, sampler.rng_mut())
        }
    };
    let x_path = chain::ChainSampler::new(&td.chain, harness::split_seed(seed, 0), start).sample_path(cps.horizon());
    let td0 = engine::run_td0(&td, &x_path, &cps, &theta0, cfg.gain)?;
    let random = engine::run_random_linear_sa(&m.random.clone().with_gain(cfg.gain), &m.pairs.pair_path(&x_path), &cps)?;
    let td_gap = td0.relative_to(&m.theta_star).max_abs_diff(&random);

    let snr = engine::run_snr_lstd(&td, &x_path, &cps, cfg.tolerances.ridge, &theta0)?;
    let first_ridge = snr.ridged_steps.first().copied().unwrap_or(usize::MAX);
    let snr_gap = snr
        .lstd
        .checkpoints
        .iter()
        .filter(|(n, _)| *n >= snr.first_invertible && *n < first_ridge)
        .filter_map(|(n, l)| snr.snr.at(*n).map(|s| (s - l).amax() / l.amax().max(1.0)))
        .fold(0.0, f64::max);

    let tol = &cfg.tolerances;
    let passed = td_gap <= tol.td_equal && snr_gap <= tol.snr_relative;
    let mut artifacts = Artifacts::default();
    for (n, v) in &td0.relative_to(&m.theta_star).checkpoints {
        artifacts.push_vector(*n, "empirical", "mean", v);
    }
    artifacts.push_theory(&pred, &cps);
    Ok(Outcome {
        summary: json!({
            "td": {
                "a": rows_json(&m.a),
                "b": m.b.as_slice(),
                "theta_star": m.theta_star.as_slice(),
                "pair_states": m.pairs.num_pairs(),
                "td0_vs_random_linear_max_gap": td_gap,
                "snr_vs_lstd_max_relative_gap": snr_gap,
                "snr_first_invertible": snr.first_invertible,
                "snr_ridged_steps": snr.ridged_steps.len(),
                "final_error": td0.relative_to(&m.theta_star).last().map(|v| v.as_slice().to_vec()),
            },
            "theory": {
                "noise_stats": stats,
                "prediction": pred,
            },
        }),
        passed: Some(passed),
        artifacts,
    })
}

fn run_tails(cfg: &ExperimentConfig) -> Result<Outcome> {
    let exp = experiment(cfg)?;
    let spec = ensemble_spec(cfg)?;
    let samples = harness::run_trials(exp.as_ref(), &spec.seeds(), &spec.checkpoints)?;
    let last = spec.checkpoints.len() - 1;
    let values = samples.column(last, 0);
    let probe = harness::tail_report(&values, &[], cfg.tails.bins)?;
    let eps = match &cfg.tails.epsilon {
        Some(e) => e.clone(),
        None => cfg.tails.epsilon_sd.iter().map(|k| k * probe.sample_sd).collect(),
    };
    let report = harness::tail_report(&values, &eps, cfg.tails.bins)?;
    let passed = report.upper_dominates();
    let emp = EmpiricalMoments::from_samples(&samples);
    let mut artifacts = Artifacts::default();
    artifacts.push_empirical(&emp);
    let summary = json!({
        "empirical": empirical_section(&emp),
        "tails": {
            "n": spec.checkpoints.horizon(),
            "report": report,
            "upper_dominates": passed,
        },
    });
    artifacts.tails = Some(report);
    Ok(Outcome {
        summary,
        passed: Some(passed),
        artifacts,
    })
}

fn dispatch(cfg: &ExperimentConfig) -> Result<Outcome> {
    match cfg.kind {
        Kind::Theory => run_theory(cfg),
        Kind::Simulate => run_simulate(cfg),
        Kind::Oracle => run_oracle(cfg),
        Kind::Compare => run_compare(cfg),
        Kind::Couple => run_couple(cfg),
        Kind::Td => run_td(cfg),
        Kind::Tails => run_tails(cfg),
    }
}

fn write_summary(out_dir: &Path, summary: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(summary)?;
    text.push('\n');
    fs::write(out_dir.join("summary.json"), text)?;
    Ok(())
}

fn error_summary(kind: Option<Kind>, hash: &str, seed: Option<u64>, err: &Error) -> Value {
    json!({
        "kind": kind.map(Kind::name),
        "config_sha256": hash,
        "master_seed": seed,
        "exit_code": EXIT_ERROR,
        "passed": Value::Null,
        "error": err.to_string(),
    })
}

/// Run a parsed config and write every artifact to `out_dir`. Returns the
/// process exit code; execution errors are reported in `summary.json`.
pub fn run_command(cfg: &ExperimentConfig, out_dir: &Path, hash: &str) -> i32 {
    if let Err(e) = fs::create_dir_all(out_dir) {
        eprintln!("markov-sa: cannot create {}: {e}", out_dir.display());
        return EXIT_ERROR;
    }
    let result = dispatch(cfg).and_then(|outcome| {
        let code = match outcome.passed {
            Some(false) => EXIT_FAILED,
            _ => EXIT_OK,
        };
        let mut summary = json!({
            "kind": cfg.kind.name(),
            "config_sha256": hash,
            "master_seed": cfg.master_seed,
            "exit_code": code,
            "passed": outcome.passed,
        });
        if let (Value::Object(dst), Value::Object(src)) = (&mut summary, outcome.summary) {
            dst.extend(src);
        }
        write_trajectory(&out_dir.join("trajectory.csv"), &outcome.artifacts.rows)?;
        if let Some(t) = &outcome.artifacts.tails {
            write_tails(&out_dir.join("tails.csv"), t)?;
        }
        write_summary(out_dir, &summary)?;
        Ok(code)
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("markov-sa: {e}");
            let _ = write_summary(out_dir, &error_summary(Some(cfg.kind), hash, cfg.master_seed, &e));
            EXIT_ERROR
        }
    }
}

/// Entry point shared by the binary and the tests.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
        }
    };
    let text = match fs::read_to_string(&cli.config) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("markov-sa: cannot read {}: {e}", cli.config.display());
            return EXIT_ERROR;
        }
    };
    let hash = config_hash(&text);
    let parsed = parse_config_with(&text, cli.seed);
    let out_dir = cli
        .out_dir
        .clone()
        .or_else(|| parsed.as_ref().ok().and_then(|c| c.out_dir.clone()))
        .unwrap_or_else(|| PathBuf::from("./out"));
    let cfg = match parsed {
        Ok(c) => c,
        Err(e) => {
            eprintln!("markov-sa: {e}");
            if fs::create_dir_all(&out_dir).is_ok() {
                let kind = parse_raw(&text).ok().map(|c| c.kind);
                let _ = write_summary(&out_dir, &error_summary(kind, &hash, cli.seed, &e));
            }
            return EXIT_ERROR;
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads.unwrap_or(0)).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("markov-sa: thread pool: {e}");
            return EXIT_ERROR;
        }
    };
    pool.install(|| run_command(&cfg, &out_dir, &hash))
}
