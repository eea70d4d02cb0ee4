//! Fixture-driven checks of closed forms and estimators against exact samples.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    analytic_fd_quotient, analytic_restricted_susceptibility, analytic_role_llc, exact_samples, posterior_moments,
    OracleError, QuadraticPotential, Result, Role,
};
use crate::estimators::{estimate_llc, estimate_susceptibility, finite_diff_std_error, finite_diff_susceptibility};
use crate::sampler::ChainTrace;

const DEFAULT_FIXTURE: &str = include_str!("../../data/oracle_scenarios.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioExpected {
    pub trace_sigma: f64,
    pub susceptibility: f64,
    pub llc: f64,
    pub llc_mixed: f64,
    pub fd_quotient: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub a: Vec<Vec<f64>>,
    pub b_mat: Vec<Vec<f64>>,
    pub b_vec: Vec<f64>,
    pub gamma: f64,
    pub n_beta: f64,
    pub delta_h: f64,
    pub mask: Option<Vec<usize>>,
    pub seed: u64,
    pub chains: usize,
    pub draws: usize,
    pub expected: ScenarioExpected,
    pub n_std_errors: f64,
}

#[derive(Deserialize)]
struct Fixture {
    scenarios: Vec<Scenario>,
}

fn matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(OracleError::Invalid("matrix rows must be square".into()));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

impl Scenario {
    pub fn potential(&self) -> Result<QuadraticPotential> {
        QuadraticPotential::new(
            matrix(&self.a)?,
            matrix(&self.b_mat)?,
            DVector::from_column_slice(&self.b_vec),
            self.gamma,
            self.n_beta,
        )
    }
}

pub fn load_scenarios(json: &str) -> Result<Vec<Scenario>> {
    Ok(serde_json::from_str::<Fixture>(json)?.scenarios)
}

/// The shipped scenario set.
pub fn default_scenarios() -> Vec<Scenario> {
    load_scenarios(DEFAULT_FIXTURE).expect("bundled oracle fixture parses")
}

/// Deliberate estimator corruption, used to check that the suite notices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mutation {
    #[default]
    None,
    FlipSusceptibilitySign,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub quantity: String,
    pub expected: f64,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(quantity: &str, expected: f64, measured: f64, tolerance: f64) -> Self {
        Self {
            quantity: quantity.to_string(),
            expected,
            measured,
            tolerance,
            passed: (measured - expected).abs() <= tolerance,
        }
    }

    pub fn error(&self) -> f64 {
        (self.measured - self.expected).abs()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioReport {
    pub name: String,
    pub checks: Vec<CheckResult>,
}

impl ScenarioReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn closed_form(quantity: &str, expected: f64, computed: f64) -> CheckResult {
    CheckResult::new(quantity, expected, computed, 1e-9 * expected.abs() + 1e-18)
}

/// LLC and finite-difference checks use this many times the scenario's chains.
const LLC_CHAIN_FACTOR: usize = 4;

fn traces(
    p: &QuadraticPotential,
    role: Role,
    mask: Option<&[usize]>,
    s: &Scenario,
    stream: u64,
) -> Result<Vec<ChainTrace>> {
    (0..s.chains * LLC_CHAIN_FACTOR)
        .into_par_iter()
        .map(|i| exact_samples(p, role, mask, None, s.draws, s.seed * 1000 + stream * 100 + i as u64))
        .collect()
}

pub fn run_scenario(s: &Scenario, mutation: Mutation) -> Result<ScenarioReport> {
    let p = s.potential()?;
    let mask = s.mask.as_deref();
    let e = &s.expected;
    let mut checks = vec![
        closed_form("closed-form trace(Sigma)", e.trace_sigma, posterior_moments(&p)?.1.trace()),
        closed_form("closed-form susceptibility", e.susceptibility, analytic_restricted_susceptibility(&p, mask)?),
        closed_form("closed-form llc", e.llc, analytic_role_llc(&p, Role::Base, mask)?),
        closed_form("closed-form mixed llc", e.llc_mixed, analytic_role_llc(&p, Role::Mixed, None)?),
        closed_form("closed-form fd quotient", e.fd_quotient, analytic_fd_quotient(&p, s.delta_h)?),
    ];

    let restricted = traces(&p, Role::Base, mask, s, 0)?;
    let full = traces(&p, Role::Base, None, s, 1)?;
    let mixed = traces(&p, Role::Mixed, None, s, 2)?;
    let est_err = |e: crate::estimators::EstimatorError| OracleError::Invalid(e.to_string());
    let k = s.n_std_errors;

    let n = s.chains;
    let chi = estimate_susceptibility(&restricted[..n], &full[..n], &s.name, "oracle", s.delta_h).map_err(est_err)?;
    let chi_value = match mutation {
        Mutation::None => chi.value,
        Mutation::FlipSusceptibilitySign => -chi.value,
    };
    checks.push(CheckResult::new("estimated susceptibility", e.susceptibility, chi_value, k * chi.std_error.unwrap_or(0.0)));

    let llc = estimate_llc(&restricted, s.n_beta).map_err(est_err)?;
    checks.push(CheckResult::new("estimated llc", e.llc, llc.value, k * llc.std_error.unwrap_or(0.0)));

    let llc_full = estimate_llc(&full, s.n_beta).map_err(est_err)?;
    let llc_mixed = estimate_llc(&mixed, s.n_beta).map_err(est_err)?;
    let fd = finite_diff_susceptibility(&llc_mixed, &llc_full, s.n_beta, s.delta_h).map_err(est_err)?;
    let fd_se = finite_diff_std_error(&llc_mixed, &llc_full, s.n_beta, s.delta_h).unwrap_or(0.0);
    checks.push(CheckResult::new("estimated fd quotient", e.fd_quotient, fd, k * fd_se));

    Ok(ScenarioReport {
        name: s.name.clone(),
        checks,
    })
}

pub fn run_scenarios(scenarios: &[Scenario], mutation: Mutation) -> Result<Vec<ScenarioReport>> {
    scenarios.iter().map(|s| run_scenario(s, mutation)).collect()
}
