//! Quadratic ground truth.
//!
//! `L(w) = L0 + 1/2 d^T A d` and `dL(w) = 1/2 d^T B d + b^T d` with `d = w - w*`.
//! Under the localized posterior the draws are Gaussian with precision
//! `n_beta A + gamma I`, so the LLC and susceptibility have closed forms, and
//! exact samples bypass SGLD entirely.

mod scenarios;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::sampler::{BatchSource, ChainTrace, Draw, Objective, ObjectiveError};

pub use scenarios::{
    default_scenarios, load_scenarios, run_scenario, run_scenarios, CheckResult, Mutation, Scenario, ScenarioExpected, ScenarioReport,
};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("invalid potential: {0}")]
    Invalid(String),
    #[error("precision matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("mask index {0} out of range")]
    MaskIndex(usize),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = OracleError> = std::result::Result<T, E>;

/// A quadratic term `1/2 d^T H d + g^T d`; also used for per-token probes.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticTerm {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
}

impl QuadraticTerm {
    pub fn eval(&self, d: &DVector<f64>) -> f64 {
        0.5 * d.dot(&(&self.hessian * d)) + self.linear.dot(d)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticPotential {
    pub a: DMatrix<f64>,
    pub b_mat: DMatrix<f64>,
    pub b_vec: DVector<f64>,
    pub w_star: DVector<f64>,
    pub gamma: f64,
    pub n_beta: f64,
    pub base_loss: f64,
}

fn is_symmetric(m: &DMatrix<f64>) -> bool {
    let scale = m.amax().max(1.0);
    (m - m.transpose()).amax() <= 1e-12 * scale
}

impl QuadraticPotential {
    pub fn new(a: DMatrix<f64>, b_mat: DMatrix<f64>, b_vec: DVector<f64>, gamma: f64, n_beta: f64) -> Result<Self> {
        let d = a.nrows();
        let p = Self {
            a,
            b_mat,
            b_vec,
            w_star: DVector::zeros(d),
            gamma,
            n_beta,
            base_loss: 0.0,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_w_star(mut self, w_star: DVector<f64>) -> Result<Self> {
        self.w_star = w_star;
        self.validate()?;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.a.nrows();
        let bad = |m: &str| Err(OracleError::Invalid(m.to_string()));
        if d == 0 || self.a.ncols() != d {
            return bad("A must be square and non-empty");
        }
        if self.b_mat.shape() != (d, d) || self.b_vec.len() != d || self.w_star.len() != d {
            return bad("B, b and w* must match the dimension of A");
        }
        if !is_symmetric(&self.a) || !is_symmetric(&self.b_mat) {
            return bad("A and B must be symmetric");
        }
        if !(self.gamma >= 0.0 && self.n_beta > 0.0) {
            return bad("need gamma >= 0 and n_beta > 0");
        }
        let min_eig = SymmetricEigen::new(self.a.clone()).eigenvalues.min();
        if min_eig < -1e-12 * self.a.amax().max(1.0) {
            return bad("A must be positive semidefinite");
        }
        self.precision(&self.a)?;
        Ok(())
    }

    pub fn perturbation(&self) -> QuadraticTerm {
        QuadraticTerm {
            hessian: self.b_mat.clone(),
            linear: self.b_vec.clone(),
        }
    }

    fn precision(&self, hessian: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
        let p = hessian * self.n_beta + DMatrix::identity(hessian.nrows(), hessian.nrows()) * self.gamma;
        Cholesky::new(p).ok_or(OracleError::NotPositiveDefinite)
    }

    fn offset(&self, w: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(w) - &self.w_star
    }

    pub fn base_loss_at(&self, w: &[f64]) -> f64 {
        let d = self.offset(w);
        self.base_loss + 0.5 * d.dot(&(&self.a * &d))
    }

    pub fn delta_loss_at(&self, w: &[f64]) -> f64 {
        self.perturbation().eval(&self.offset(w))
    }
}

/// Which loss a chain or sample set treats as its own.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Base,
    /// `L + dL`: the potential of the mixed data distribution.
    Mixed,
}

fn restrict(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), idx.len(), |i, j| m[(idx[i], idx[j])])
}

fn indices(p: &QuadraticPotential, mask: Option<&[usize]>) -> Result<Vec<usize>> {
    match mask {
        None => Ok((0..p.dim()).collect()),
        Some(ix) => {
            if let Some(&bad) = ix.iter().find(|&&i| i >= p.dim()) {
                return Err(OracleError::MaskIndex(bad));
            }
            Ok(ix.to_vec())
        }
    }
}

/// Hessian, linear term, posterior mean offset and covariance on the free coordinates.
struct Restricted {
    idx: Vec<usize>,
    hessian: DMatrix<f64>,
    linear: DVector<f64>,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol_cov: DMatrix<f64>,
}

fn restricted(p: &QuadraticPotential, role: Role, mask: Option<&[usize]>) -> Result<Restricted> {
    let idx = indices(p, mask)?;
    let (full_h, full_b) = match role {
        Role::Base => (p.a.clone(), DVector::zeros(p.dim())),
        Role::Mixed => (&p.a + &p.b_mat, p.b_vec.clone()),
    };
    let hessian = restrict(&full_h, &idx);
    let linear = DVector::from_iterator(idx.len(), idx.iter().map(|&i| full_b[i]));
    let chol = p.precision(&hessian)?;
    let cov = chol.inverse();
    let mean = -(&cov * &linear) * p.n_beta;
    let chol_cov = Cholesky::new(cov.clone()).ok_or(OracleError::NotPositiveDefinite)?.unpack();
    Ok(Restricted {
        idx,
        hessian,
        linear,
        mean,
        cov,
        chol_cov,
    })
}

/// Mean `w*` and covariance `(n_beta A + gamma I)^-1`.
pub fn posterior_moments(p: &QuadraticPotential) -> Result<(DVector<f64>, DMatrix<f64>)> {
    Ok((p.w_star.clone(), p.precision(&p.a)?.inverse()))
}

/// `-1/2 tr(A S B S)`; the linear term has zero covariance with the even observable.
pub fn analytic_susceptibility(p: &QuadraticPotential) -> Result<f64> {
    analytic_restricted_susceptibility(p, None)
}

/// Expected estimator value with draws restricted to `mask` and the
/// second term taken over the full posterior.
pub fn analytic_restricted_susceptibility(p: &QuadraticPotential, mask: Option<&[usize]>) -> Result<f64> {
    let r = restricted(p, Role::Base, mask)?;
    let (_, full_cov) = posterior_moments(p)?;
    let bc = restrict(&p.b_mat, &r.idx);
    let a_s = &r.hessian * &r.cov;
    let b_s = &bc * &r.cov;
    let cov = 0.5 * (&a_s * &b_s).trace();
    let e_phi = 0.5 * a_s.trace();
    let e_dl_restricted = 0.5 * b_s.trace();
    let e_dl_full = 0.5 * (&p.b_mat * &full_cov).trace();
    Ok(-cov - e_phi * (e_dl_restricted - e_dl_full))
}

/// `n_beta * 1/2 tr(A S)`.
pub fn analytic_llc(p: &QuadraticPotential) -> Result<f64> {
    analytic_role_llc(p, Role::Base, None)
}

/// Population LLC of the given role's potential, optionally restricted.
pub fn analytic_role_llc(p: &QuadraticPotential, role: Role, mask: Option<&[usize]>) -> Result<f64> {
    let r = restricted(p, role, mask)?;
    let quad = 0.5 * (&r.hessian * &r.cov).trace() + 0.5 * r.mean.dot(&(&r.hessian * &r.mean));
    Ok(p.n_beta * (quad + r.linear.dot(&r.mean)))
}

/// `(llc(L + dL) - llc(L)) / (n_beta^2 dh)` from the closed forms.
pub fn analytic_fd_quotient(p: &QuadraticPotential, delta_h: f64) -> Result<f64> {
    let mixed = analytic_role_llc(p, Role::Mixed, None)?;
    let base = analytic_role_llc(p, Role::Base, None)?;
    Ok((mixed - base) / (p.n_beta * p.n_beta * delta_h))
}

/// Exact posterior draws of `role`, optionally restricted to `mask`, shaped
/// like an SGLD trace.
///
/// For [`Role::Base`], `l_mixed = l_base + dL`. For [`Role::Mixed`], `l_base`
/// is the mixed loss itself and `l_mixed` is absent. Each probe term adds a
/// per-token loss `l_base + term`.
pub fn exact_samples(
    p: &QuadraticPotential,
    role: Role,
    mask: Option<&[usize]>,
    probe: Option<&[QuadraticTerm]>,
    count: usize,
    seed: u64,
) -> Result<ChainTrace> {
    let r = restricted(p, role, mask)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pert = p.perturbation();
    let k = r.idx.len();
    let mut z = DVector::zeros(k);
    let mut offset = DVector::zeros(p.dim());
    let draws = (0..count)
        .map(|_| {
            for zi in z.iter_mut() {
                *zi = StandardNormal.sample(&mut rng);
            }
            let local = &r.mean + &r.chol_cov * &z;
            for (j, &i) in r.idx.iter().enumerate() {
                offset[i] = local[j];
            }
            let base = p.base_loss + 0.5 * offset.dot(&(&p.a * &offset));
            let dl = pert.eval(&offset);
            let (l_base, l_mixed) = match role {
                Role::Base => (base, Some(base + dl)),
                Role::Mixed => (base + dl, None),
            };
            Draw {
                l_base,
                l_mixed,
                per_token: probe.map(|terms| terms.iter().map(|t| l_base + t.eval(&offset)).collect()),
            }
        })
        .collect();
    Ok(ChainTrace {
        draws,
        w_star_loss: p.base_loss,
        restricted: mask.map(|m| format!("{m:?}")),
        seed,
        positions: None,
    })
}

/// Exact unrestricted draws from the base posterior.
pub fn exact_gaussian_samples(p: &QuadraticPotential, count: usize, seed: u64) -> Result<ChainTrace> {
    exact_samples(p, Role::Base, None, None, count, seed)
}

/// The potential as a sampler objective; batches select the role.
pub struct QuadraticObjective {
    pub potential: QuadraticPotential,
}

impl Objective for QuadraticObjective {
    type Batch = Role;
    type Probe = [QuadraticTerm];

    fn dim(&self) -> usize {
        self.potential.dim()
    }

    fn loss(&self, w: &[f64], role: &Role) -> Result<f64, ObjectiveError> {
        let p = &self.potential;
        Ok(match role {
            Role::Base => p.base_loss_at(w),
            Role::Mixed => p.base_loss_at(w) + p.delta_loss_at(w),
        })
    }

    fn loss_and_grad(&self, w: &[f64], role: &Role, grad: &mut [f64]) -> Result<f64, ObjectiveError> {
        let p = &self.potential;
        let d = p.offset(w);
        let mut g = &p.a * &d;
        if *role == Role::Mixed {
            g += &p.b_mat * &d + &p.b_vec;
        }
        grad.copy_from_slice(g.as_slice());
        self.loss(w, role)
    }

    fn probe_losses(&self, w: &[f64], probe: &[QuadraticTerm]) -> Result<Vec<f64>, ObjectiveError> {
        let base = self.potential.base_loss_at(w);
        let d = self.potential.offset(w);
        Ok(probe.iter().map(|t| base + t.eval(&d)).collect())
    }
}

/// Batch source that always yields one role.
pub struct RoleSource(pub Role);

impl BatchSource<Role> for RoleSource {
    fn draw(&self, _: usize, _: &mut ChaCha8Rng) -> Result<Role, ObjectiveError> {
        Ok(self.0)
    }
}
