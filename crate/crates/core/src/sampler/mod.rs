//! Localized SGLD around a checkpoint, optionally restricted to a component.
//!
//! Each step draws a base batch, evaluates loss and gradient, records the
//! draw, then moves the masked coordinates by
//! `-(eps/2) (n_beta * grad + gamma (w - w*)) + N(0, eps)`.
//! Draw `t` therefore records losses at `w_t` before the update, and the
//! first recorded draw (with no burn-in) sits at `w*`.

mod trace;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{sample_batch_with, Corpus};
use crate::model::{ComponentMask, SampleBatch, Transformer};

pub use trace::{read_trace_jsonl, write_trace_jsonl, ChainTrace, Draw};

pub type ObjectiveError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid sampler config: {0}")]
    InvalidConfig(String),
    #[error("objective failed at draw {step}: {source}")]
    Objective {
        step: usize,
        #[source]
        source: ObjectiveError,
    },
    #[error("chain diverged at step {step}: loss {loss} exceeds ceiling {ceiling}")]
    Diverged { step: usize, loss: f64, ceiling: f64 },
    #[error("chain {index}: {source}")]
    Chain {
        index: usize,
        #[source]
        source: Box<SamplerError>,
    },
}

pub type Result<T, E = SamplerError> = std::result::Result<T, E>;

/// Anything the sampler can walk over: a loss with gradient on batches, and
/// per-token losses on a fixed probe set.
pub trait Objective: Sync {
    type Batch: Send + Sync;
    type Probe: Sync + ?Sized;

    fn dim(&self) -> usize;

    fn loss(&self, w: &[f64], batch: &Self::Batch) -> Result<f64, ObjectiveError>;

    fn loss_and_grad(&self, w: &[f64], batch: &Self::Batch, grad: &mut [f64]) -> Result<f64, ObjectiveError>;

    fn probe_losses(&self, w: &[f64], probe: &Self::Probe) -> Result<Vec<f64>, ObjectiveError>;
}

pub trait BatchSource<B>: Sync {
    fn draw(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<B, ObjectiveError>;
}

impl Objective for Transformer {
    type Batch = SampleBatch;
    type Probe = [Vec<u32>];

    fn dim(&self) -> usize {
        Transformer::dim(self)
    }

    fn loss(&self, w: &[f64], batch: &SampleBatch) -> Result<f64, ObjectiveError> {
        Ok(self.batch_loss(w, batch)?)
    }

    fn loss_and_grad(&self, w: &[f64], batch: &SampleBatch, grad: &mut [f64]) -> Result<f64, ObjectiveError> {
        Ok(Transformer::loss_and_grad(self, w, batch, grad)?)
    }

    /// Per-token losses of every probe context, concatenated in order.
    fn probe_losses(&self, w: &[f64], probe: &[Vec<u32>]) -> Result<Vec<f64>, ObjectiveError> {
        let per_ctx: Vec<Vec<f64>> = probe
            .par_iter()
            .map(|ctx| self.per_token_losses(w, ctx))
            .collect::<std::result::Result<_, _>>()?;
        Ok(per_ctx.concat())
    }
}

impl BatchSource<SampleBatch> for Corpus {
    fn draw(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<SampleBatch, ObjectiveError> {
        Ok(sample_batch_with(self, n, rng)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BatchMode {
    #[default]
    ResampleEachStep,
    FixedPerChain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgldConfig {
    pub epsilon: f64,
    pub gamma: f64,
    pub n_beta: f64,
    pub n_batch: usize,
    pub n_draws: usize,
    pub n_chains: usize,
    pub burn_in: usize,
    pub seed: u64,
    pub noise_enabled: bool,
    pub batch_mode: BatchMode,
    /// Draw mixed batches from the same random stream as base batches.
    pub shared_batches: bool,
    /// Abort once a loss exceeds this multiple of `max(L(w*), 1)`.
    pub divergence_factor: f64,
    pub w_star_loss: Option<f64>,
    pub record_positions: bool,
}

impl Default for SgldConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.001,
            gamma: 300.0,
            n_beta: 30.0,
            n_batch: 64,
            n_draws: 200,
            n_chains: 4,
            burn_in: 0,
            seed: 0,
            noise_enabled: true,
            batch_mode: BatchMode::ResampleEachStep,
            shared_batches: false,
            divergence_factor: 10.0,
            w_star_loss: None,
            record_positions: false,
        }
    }
}

impl SgldConfig {
    /// Defaults for per-token runs: fewer draws on smaller batches.
    pub fn per_token() -> Self {
        Self {
            n_draws: 100,
            n_batch: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SamplerError::InvalidConfig(m.to_string()));
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon must be positive");
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad("gamma must be non-negative");
        }
        if !(self.n_beta > 0.0 && self.n_beta.is_finite()) {
            return bad("n_beta must be positive");
        }
        if self.n_draws == 0 {
            return bad("n_draws must be at least 1");
        }
        if self.n_chains == 0 {
            return bad("n_chains must be at least 1");
        }
        if self.n_batch == 0 {
            return bad("n_batch must be at least 1");
        }
        if self.divergence_factor.is_nan() || self.divergence_factor <= 0.0 {
            return bad("divergence_factor must be positive");
        }
        Ok(())
    }
}

/// Everything a chain reads. `mixed` adds `L_mixed` records, `probe` adds
/// per-token records, `mask` freezes every coordinate outside it.
pub struct ChainInputs<'a, O: Objective + ?Sized, S: ?Sized> {
    pub objective: &'a O,
    pub w_star: &'a [f64],
    pub base: &'a S,
    pub mixed: Option<&'a S>,
    pub probe: Option<&'a O::Probe>,
    pub mask: Option<&'a ComponentMask>,
}

impl<O: Objective + ?Sized, S: ?Sized> Clone for ChainInputs<'_, O, S> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<O: Objective + ?Sized, S: ?Sized> Copy for ChainInputs<'_, O, S> {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Serial,
    #[default]
    Parallel,
}

const NOISE_STREAM: u64 = 0;
const BASE_STREAM: u64 = 1;
const MIXED_STREAM: u64 = 2;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

pub fn sgld_chain<O, S>(inputs: ChainInputs<'_, O, S>, cfg: &SgldConfig, seed: u64) -> Result<ChainTrace>
where
    O: Objective + ?Sized,
    S: BatchSource<O::Batch> + ?Sized,
{
    cfg.validate()?;
    let obj = inputs.objective;
    let dim = obj.dim();
    if inputs.w_star.len() != dim {
        return Err(SamplerError::InvalidConfig(format!(
            "w_star has {} coordinates, objective has {dim}",
            inputs.w_star.len()
        )));
    }
    let active: Vec<usize> = match inputs.mask {
        Some(m) if m.len() != dim => {
            return Err(SamplerError::InvalidConfig(format!(
                "mask {} covers {} coordinates, objective has {dim}",
                m.label,
                m.len()
            )))
        }
        Some(m) => m.indices().collect(),
        None => (0..dim).collect(),
    };

    let mut noise_rng = stream(seed, NOISE_STREAM);
    let mut base_rng = stream(seed, BASE_STREAM);
    let mut mixed_rng = stream(seed, MIXED_STREAM);
    let objective_err = |step: usize| move |source: ObjectiveError| SamplerError::Objective { step, source };

    let draw_pair = |base_rng: &mut ChaCha8Rng, mixed_rng: &mut ChaCha8Rng, step: usize| -> Result<(O::Batch, Option<O::Batch>)> {
        let shared = base_rng.clone();
        let base = inputs.base.draw(cfg.n_batch, base_rng).map_err(objective_err(step))?;
        let mixed = match inputs.mixed {
            Some(src) => {
                let batch = if cfg.shared_batches {
                    src.draw(cfg.n_batch, &mut shared.clone())
                } else {
                    src.draw(cfg.n_batch, mixed_rng)
                };
                Some(batch.map_err(objective_err(step))?)
            }
            None => None,
        };
        Ok((base, mixed))
    };

    let fixed = match cfg.batch_mode {
        BatchMode::FixedPerChain => Some(draw_pair(&mut base_rng, &mut mixed_rng, 0)?),
        BatchMode::ResampleEachStep => None,
    };

    let mut w = inputs.w_star.to_vec();
    let mut grad = vec![0.0; dim];
    let mut draws = Vec::with_capacity(cfg.n_draws);
    let mut positions = cfg.record_positions.then(Vec::new);
    let mut w_star_loss = cfg.w_star_loss;
    let mut ceiling = f64::INFINITY;
    let half_eps = 0.5 * cfg.epsilon;
    let noise_scale = cfg.epsilon.sqrt();

    for step in 0..cfg.burn_in + cfg.n_draws {
        let fresh;
        let (base_batch, mixed_batch) = match &fixed {
            Some((b, m)) => (b, m.as_ref()),
            None => {
                fresh = draw_pair(&mut base_rng, &mut mixed_rng, step)?;
                (&fresh.0, fresh.1.as_ref())
            }
        };
        grad.iter_mut().for_each(|g| *g = 0.0);
        let l_base = obj.loss_and_grad(&w, base_batch, &mut grad).map_err(objective_err(step))?;
        if step == 0 {
            let reference = *w_star_loss.get_or_insert(l_base);
            ceiling = cfg.divergence_factor * reference.max(1.0);
        }
        let check = |loss: f64| {
            if loss.is_finite() && loss <= ceiling {
                Ok(loss)
            } else {
                Err(SamplerError::Diverged { step, loss, ceiling })
            }
        };
        check(l_base)?;
        if step >= cfg.burn_in {
            let l_mixed = match mixed_batch {
                Some(mb) => Some(check(obj.loss(&w, mb).map_err(objective_err(step))?)?),
                None => None,
            };
            let per_token = match inputs.probe {
                Some(p) => {
                    let losses = obj.probe_losses(&w, p).map_err(objective_err(step))?;
                    if let Some(bad) = losses.iter().find(|l| !l.is_finite()) {
                        return Err(SamplerError::Diverged { step, loss: *bad, ceiling });
                    }
                    Some(losses)
                }
                None => None,
            };
            draws.push(Draw { l_base, l_mixed, per_token });
            if let Some(p) = positions.as_mut() {
                p.push(w.clone());
            }
        }
        for &i in &active {
            let drift = cfg.n_beta * grad[i] + cfg.gamma * (w[i] - inputs.w_star[i]);
            w[i] -= half_eps * drift;
            if cfg.noise_enabled {
                let z: f64 = StandardNormal.sample(&mut noise_rng);
                w[i] += noise_scale * z;
            }
        }
    }

    Ok(ChainTrace {
        draws,
        w_star_loss: w_star_loss.expect("at least one step runs"),
        restricted: inputs.mask.map(|m| m.label.clone()),
        seed,
        positions,
    })
}

/// Runs `cfg.n_chains` chains with seeds `cfg.seed + i`, returned in chain order.
pub fn run_chains<O, S>(inputs: ChainInputs<'_, O, S>, cfg: &SgldConfig, execution: Execution) -> Result<Vec<ChainTrace>>
where
    O: Objective + ?Sized,
    S: BatchSource<O::Batch> + ?Sized,
{
    cfg.validate()?;
    let one = |i: usize| {
        sgld_chain(inputs, cfg, cfg.seed.wrapping_add(i as u64)).map_err(|e| SamplerError::Chain {
            index: i,
            source: Box::new(e),
        })
    };
    match execution {
        Execution::Serial => (0..cfg.n_chains).map(one).collect(),
        Execution::Parallel => (0..cfg.n_chains).into_par_iter().map(one).collect(),
    }
}
