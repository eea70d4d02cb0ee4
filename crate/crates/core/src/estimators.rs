//! Susceptibility, per-token susceptibility and LLC estimates from chain traces.
//!
//! Every estimate is computed per chain and then averaged; standard errors
//! are across chains (sample standard deviation over `sqrt(chains)`).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sampler::ChainTrace;

#[derive(Debug, Error, PartialEq)]
pub enum EstimatorError {
    #[error("no chains supplied")]
    NoChains,
    #[error("restricted and full runs have {0} and {1} chains")]
    ChainCountMismatch(usize, usize),
    #[error("chain {chain}: {0} and {1} draws", chain = .2)]
    DrawCountMismatch(usize, usize, usize),
    #[error("chain {0} has no draws")]
    EmptyTrace(usize),
    #[error("chain {0} lacks mixed-batch losses")]
    MissingMixed(usize),
    #[error("chain {0} lacks per-token losses")]
    MissingPerToken(usize),
    #[error("per-token width differs: expected {expected}, chain {chain} has {found}")]
    PerTokenWidth { chain: usize, expected: usize, found: usize },
    #[error("delta_h must be nonzero")]
    ZeroDeltaH,
    #[error("identity only holds for estimates in controlled mode")]
    NotControlled,
    #[error("per-token estimate is empty")]
    EmptyPerToken,
}

pub type Result<T, E = EstimatorError> = std::result::Result<T, E>;

/// How `L_mixed` was obtained for a susceptibility estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MixMode {
    #[default]
    Sampled,
    /// `L_mixed := (1 - dh) L_base + dh * mean(per-token)` on the same draws.
    Controlled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SusceptibilityEstimate {
    pub value: f64,
    pub per_chain: Vec<f64>,
    pub std_error: Option<f64>,
    pub component: String,
    pub probe: String,
    pub delta_h: f64,
    pub mode: MixMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenKey {
    pub context: usize,
    pub position: usize,
    pub token: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSusceptibility {
    #[serde(flatten)]
    pub key: TokenKey,
    pub value: f64,
    pub std_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerTokenEstimate {
    pub component: String,
    pub dataset: String,
    pub tokens: Vec<TokenSusceptibility>,
    /// Mean per-token value for each chain.
    pub chain_means: Vec<f64>,
}

impl PerTokenEstimate {
    pub fn values(&self) -> Vec<f64> {
        self.tokens.iter().map(|t| t.value).collect()
    }

    pub fn mean(&self) -> f64 {
        self.tokens.iter().map(|t| t.value).sum::<f64>() / self.tokens.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlcEstimate {
    pub value: f64,
    pub per_chain: Vec<f64>,
    pub std_error: Option<f64>,
}

pub(crate) fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation over `sqrt(n)`; undefined below two values.
pub fn std_error(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64;
    Some((var / xs.len() as f64).sqrt())
}

/// Keys for every predicted position of each probe context, in the order
/// per-token losses are recorded.
pub fn token_keys(contexts: &[Vec<u32>]) -> Vec<TokenKey> {
    contexts
        .iter()
        .enumerate()
        .flat_map(|(c, ctx)| {
            (1..ctx.len()).map(move |p| TokenKey {
                context: c,
                position: p,
                token: ctx[p],
            })
        })
        .collect()
}

/// `-(1/r) sum phi_t d_t + (1/r^2) (sum phi_t)(sum d'_t)` for one chain.
fn chain_chi(phi: &[f64], delta: &[f64], delta_full: &[f64]) -> f64 {
    let r = phi.len() as f64;
    let cross: f64 = phi.iter().zip(delta).map(|(p, d)| p * d).sum();
    let sum_phi: f64 = phi.iter().sum();
    let sum_full: f64 = delta_full.iter().sum();
    -cross / r + sum_phi * sum_full / (r * r)
}

fn check_pairs(restricted: &[ChainTrace], full: &[ChainTrace]) -> Result<()> {
    if restricted.is_empty() {
        return Err(EstimatorError::NoChains);
    }
    if restricted.len() != full.len() {
        return Err(EstimatorError::ChainCountMismatch(restricted.len(), full.len()));
    }
    for (i, (r, f)) in restricted.iter().zip(full).enumerate() {
        if r.is_empty() {
            return Err(EstimatorError::EmptyTrace(i));
        }
        if r.len() != f.len() {
            return Err(EstimatorError::DrawCountMismatch(r.len(), f.len(), i));
        }
    }
    Ok(())
}

fn phi(trace: &ChainTrace) -> Vec<f64> {
    trace.draws.iter().map(|d| d.l_base - trace.w_star_loss).collect()
}

fn mixed_gap(trace: &ChainTrace, chain: usize) -> Result<Vec<f64>> {
    trace
        .draws
        .iter()
        .map(|d| d.l_mixed.map(|m| m - d.l_base).ok_or(EstimatorError::MissingMixed(chain)))
        .collect()
}

/// Susceptibility from restricted draws `w_t` and full-posterior draws `w'_t`,
/// paired chain by chain.
pub fn estimate_susceptibility(
    restricted: &[ChainTrace],
    full: &[ChainTrace],
    component: &str,
    probe: &str,
    delta_h: f64,
) -> Result<SusceptibilityEstimate> {
    check_pairs(restricted, full)?;
    let per_chain = restricted
        .iter()
        .zip(full)
        .enumerate()
        .map(|(i, (r, f))| Ok(chain_chi(&phi(r), &mixed_gap(r, i)?, &mixed_gap(f, i)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SusceptibilityEstimate {
        value: mean(&per_chain),
        std_error: std_error(&per_chain),
        per_chain,
        component: component.to_string(),
        probe: probe.to_string(),
        delta_h,
        mode: MixMode::Sampled,
    })
}

/// Single-sample-set variant: both terms use the same draws.
pub fn estimate_susceptibility_single(
    traces: &[ChainTrace],
    component: &str,
    probe: &str,
    delta_h: f64,
) -> Result<SusceptibilityEstimate> {
    estimate_susceptibility(traces, traces, component, probe, delta_h)
}

fn per_token_matrix(trace: &ChainTrace, chain: usize, width: usize) -> Result<Vec<&[f64]>> {
    trace
        .draws
        .iter()
        .map(|d| match &d.per_token {
            None => Err(EstimatorError::MissingPerToken(chain)),
            Some(v) if v.len() != width => Err(EstimatorError::PerTokenWidth {
                chain,
                expected: width,
                found: v.len(),
            }),
            Some(v) => Ok(v.as_slice()),
        })
        .collect()
}

/// Per-token susceptibilities, one per key; `keys` must match the order of
/// the recorded per-token losses.
pub fn estimate_per_token(
    restricted: &[ChainTrace],
    full: &[ChainTrace],
    keys: &[TokenKey],
    component: &str,
    dataset: &str,
) -> Result<PerTokenEstimate> {
    check_pairs(restricted, full)?;
    if keys.is_empty() {
        return Err(EstimatorError::EmptyPerToken);
    }
    let width = keys.len();
    let mut per_chain = Vec::with_capacity(restricted.len());
    for (i, (r, f)) in restricted.iter().zip(full).enumerate() {
        let rt = per_token_matrix(r, i, width)?;
        let ft = per_token_matrix(f, i, width)?;
        let phi = phi(r);
        let n = phi.len() as f64;
        let sum_phi: f64 = phi.iter().sum();
        let mut values = vec![0.0; width];
        for (k, v) in values.iter_mut().enumerate() {
            let mut cross = 0.0;
            let mut sum_full = 0.0;
            for t in 0..phi.len() {
                cross += phi[t] * (rt[t][k] - r.draws[t].l_base);
                sum_full += ft[t][k] - f.draws[t].l_base;
            }
            *v = -cross / n + sum_phi * sum_full / (n * n);
        }
        per_chain.push(values);
    }
    let tokens = keys
        .iter()
        .enumerate()
        .map(|(k, key)| {
            let xs: Vec<f64> = per_chain.iter().map(|c| c[k]).collect();
            TokenSusceptibility {
                key: key.clone(),
                value: mean(&xs),
                std_error: std_error(&xs),
            }
        })
        .collect();
    Ok(PerTokenEstimate {
        component: component.to_string(),
        dataset: dataset.to_string(),
        tokens,
        chain_means: per_chain.iter().map(|c| mean(c)).collect(),
    })
}

/// Replaces `L_mixed` on every draw by `(1 - dh) L_base + dh * mean(per-token)`.
pub fn controlled_traces(traces: &[ChainTrace], delta_h: f64) -> Result<Vec<ChainTrace>> {
    traces
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let mut out = t.clone();
            for d in &mut out.draws {
                let pt = d.per_token.as_ref().ok_or(EstimatorError::MissingPerToken(i))?;
                if pt.is_empty() {
                    return Err(EstimatorError::EmptyPerToken);
                }
                d.l_mixed = Some((1.0 - delta_h) * d.l_base + delta_h * mean(pt));
            }
            Ok(out)
        })
        .collect()
}

/// Susceptibility in controlled mode, from traces carrying per-token losses.
pub fn estimate_susceptibility_controlled(
    restricted: &[ChainTrace],
    full: &[ChainTrace],
    component: &str,
    probe: &str,
    delta_h: f64,
) -> Result<SusceptibilityEstimate> {
    let r = controlled_traces(restricted, delta_h)?;
    let f = controlled_traces(full, delta_h)?;
    let mut est = estimate_susceptibility(&r, &f, component, probe, delta_h)?;
    est.mode = MixMode::Controlled;
    Ok(est)
}

/// `|chi - dh * mean(chi_(x,y))|`.
pub fn aggregate_identity_check(
    susceptibility: &SusceptibilityEstimate,
    per_token: &PerTokenEstimate,
    delta_h: f64,
) -> Result<f64> {
    if susceptibility.mode != MixMode::Controlled {
        return Err(EstimatorError::NotControlled);
    }
    if per_token.tokens.is_empty() {
        return Err(EstimatorError::EmptyPerToken);
    }
    Ok((susceptibility.value - delta_h * per_token.mean()).abs())
}

/// `n_beta * (mean_t L_base(w_t) - L(w*))`, per chain then averaged.
pub fn estimate_llc(traces: &[ChainTrace], n_beta: f64) -> Result<LlcEstimate> {
    if traces.is_empty() {
        return Err(EstimatorError::NoChains);
    }
    let per_chain = traces
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if t.is_empty() {
                return Err(EstimatorError::EmptyTrace(i));
            }
            Ok(n_beta * mean(&phi(t)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LlcEstimate {
        value: mean(&per_chain),
        std_error: std_error(&per_chain),
        per_chain,
    })
}

/// `(llc_mixed - llc_base) / (n_beta^2 * dh)`.
pub fn finite_diff_susceptibility(llc_mixed: &LlcEstimate, llc_base: &LlcEstimate, n_beta: f64, delta_h: f64) -> Result<f64> {
    if delta_h == 0.0 {
        return Err(EstimatorError::ZeroDeltaH);
    }
    Ok((llc_mixed.value - llc_base.value) / (n_beta * n_beta * delta_h))
}

/// Standard error of the finite difference, treating the two runs as independent.
pub fn finite_diff_std_error(llc_mixed: &LlcEstimate, llc_base: &LlcEstimate, n_beta: f64, delta_h: f64) -> Option<f64> {
    let (a, b) = (llc_mixed.std_error?, llc_base.std_error?);
    Some((a * a + b * b).sqrt() / (n_beta * n_beta * delta_h.abs()))
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub fn susceptibilities_to_csv(estimates: &[SusceptibilityEstimate]) -> String {
    let mut out = String::from("component,probe,delta_h,value,std_error\n");
    for e in estimates {
        let _ = writeln!(out, "{},{},{},{},{}", e.component, e.probe, e.delta_h, e.value, opt(e.std_error));
    }
    out
}

#[derive(Serialize)]
struct PerTokenRecord<'a> {
    dataset: &'a str,
    component: &'a str,
    context: usize,
    position: usize,
    token: u32,
    value: f64,
    std_error: Option<f64>,
}

/// One JSON object per token, keyed by dataset, context, position and token.
pub fn per_token_to_jsonl(estimate: &PerTokenEstimate) -> String {
    let mut out = String::new();
    for t in &estimate.tokens {
        let rec = PerTokenRecord {
            dataset: &estimate.dataset,
            component: &estimate.component,
            context: t.key.context,
            position: t.key.position,
            token: t.key.token,
            value: t.value,
            std_error: t.std_error,
        };
        out.push_str(&serde_json::to_string(&rec).expect("plain record serializes"));
        out.push('\n');
    }
    out
}

/// Reads records written by [`per_token_to_jsonl`], grouped by (dataset, component)
/// in first-seen order.
pub fn per_token_from_jsonl(text: &str) -> serde_json::Result<Vec<PerTokenEstimate>> {
    #[derive(Deserialize)]
    struct Rec {
        dataset: String,
        component: String,
        context: usize,
        position: usize,
        token: u32,
        value: f64,
        std_error: Option<f64>,
    }
    let mut out: Vec<PerTokenEstimate> = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let r: Rec = serde_json::from_str(line)?;
        let tok = TokenSusceptibility {
            key: TokenKey {
                context: r.context,
                position: r.position,
                token: r.token,
            },
            value: r.value,
            std_error: r.std_error,
        };
        match out.iter_mut().find(|e| e.dataset == r.dataset && e.component == r.component) {
            Some(e) => e.tokens.push(tok),
            None => out.push(PerTokenEstimate {
                component: r.component,
                dataset: r.dataset,
                tokens: vec![tok],
                chain_means: Vec::new(),
            }),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::Draw;

    fn trace(w_star: f64, base: &[f64], mixed: &[f64]) -> ChainTrace {
        ChainTrace {
            draws: base
                .iter()
                .zip(mixed)
                .map(|(&b, &m)| Draw { l_base: b, l_mixed: Some(m), per_token: None })
                .collect(),
            w_star_loss: w_star,
            restricted: None,
            seed: 0,
            positions: None,
        }
    }

    fn with_tokens(mut t: ChainTrace, tokens: &[&[f64]]) -> ChainTrace {
        for (d, tk) in t.draws.iter_mut().zip(tokens) {
            d.per_token = Some(tk.to_vec());
        }
        t
    }

    #[test]
    fn null_perturbation_gives_exact_zero() {
        let r = trace(1.0, &[1.2, 0.9, 1.5], &[1.2, 0.9, 1.5]);
        let f = trace(1.0, &[1.1, 1.3, 0.8], &[1.1, 1.3, 0.8]);
        let e = estimate_susceptibility(&[r], &[f], "h", "p", 0.1).unwrap();
        assert_eq!(e.value, 0.0);
        assert_eq!(e.std_error, None);
    }

    #[test]
    fn constant_phi_gives_exact_zero() {
        let r = trace(2.0, &[2.0, 2.0], &[3.0, -1.0]);
        let f = trace(2.0, &[1.0, 5.0], &[4.0, 0.0]);
        assert_eq!(estimate_susceptibility(&[r], &[f], "h", "p", 0.1).unwrap().value, 0.0);
    }

    #[test]
    fn hand_trace_per_token() {
        // phi = (1, -1), token gap = (1, -1), full-trace gaps sum to zero
        let r = with_tokens(trace(0.0, &[1.0, -1.0], &[0.0, 0.0]), &[&[2.0], &[-2.0]]);
        let f = with_tokens(trace(0.0, &[0.5, 0.5], &[0.0, 0.0]), &[&[1.0], &[0.0]]);
        let keys = vec![TokenKey { context: 0, position: 1, token: 7 }];
        let e = estimate_per_token(&[r], &[f], &keys, "h", "d").unwrap();
        assert_eq!(e.tokens[0].value, -1.0);
    }

    #[test]
    fn same_trace_gives_minus_covariance() {
        let t = trace(0.5, &[1.0, 2.0, 4.0, 3.0], &[1.5, 2.0, 5.0, 2.0]);
        let phi: Vec<f64> = t.draws.iter().map(|d| d.l_base - 0.5).collect();
        let gap: Vec<f64> = t.draws.iter().map(|d| d.l_mixed.unwrap() - d.l_base).collect();
        let (mp, mg) = (mean(&phi), mean(&gap));
        let cov = phi.iter().zip(&gap).map(|(p, g)| (p - mp) * (g - mg)).sum::<f64>() / 4.0;
        let e = estimate_susceptibility_single(&[t], "h", "p", 0.1).unwrap();
        assert!((e.value + cov).abs() < 1e-15);
        assert!(e.value < 0.0);
    }

    #[test]
    fn shifting_loss_reference_is_invariant_and_gap_is_linear() {
        let r = trace(0.3, &[0.5, 0.9, 0.2, 0.7], &[0.6, 0.4, 0.1, 1.0]);
        let f = trace(0.3, &[0.4, 0.6, 0.8, 0.35], &[0.1, 0.9, 0.7, 0.3]);
        let base = estimate_susceptibility(&[r.clone()], &[f.clone()], "h", "p", 0.1).unwrap().value;
        let shift = |t: &ChainTrace, c: f64| {
            let mut t = t.clone();
            t.w_star_loss += c;
            for d in &mut t.draws {
                d.l_base += c;
                d.l_mixed = d.l_mixed.map(|m| m + c);
            }
            t
        };
        let shifted = estimate_susceptibility(&[shift(&r, 0.25)], &[shift(&f, 0.25)], "h", "p", 0.1).unwrap().value;
        assert!((shifted - base).abs() < 1e-14);
        let scale = |t: &ChainTrace, a: f64| {
            let mut t = t.clone();
            for d in &mut t.draws {
                d.l_mixed = Some(d.l_base + a * (d.l_mixed.unwrap() - d.l_base));
            }
            t
        };
        let scaled = estimate_susceptibility(&[scale(&r, 2.0)], &[scale(&f, 2.0)], "h", "p", 0.1).unwrap().value;
        assert!((scaled - 2.0 * base).abs() < 1e-14);
    }

    #[test]
    fn chain_average_and_errors() {
        let a = trace(0.0, &[1.0, 2.0], &[2.0, 1.0]);
        let b = trace(0.0, &[0.5, 1.0], &[1.0, 1.5]);
        let e = estimate_susceptibility(&[a.clone(), b.clone()], &[a.clone(), b.clone()], "h", "p", 0.1).unwrap();
        assert!((e.value - mean(&e.per_chain)).abs() < 1e-15);
        let swapped = estimate_susceptibility(&[b.clone(), a.clone()], &[b.clone(), a.clone()], "h", "p", 0.1).unwrap();
        assert_eq!(e.value, swapped.value);
        assert!(e.std_error.is_some());

        assert_eq!(estimate_susceptibility(&[], &[], "h", "p", 0.1).unwrap_err(), EstimatorError::NoChains);
        assert!(matches!(estimate_susceptibility(&[a.clone()], &[a.clone(), b.clone()], "h", "p", 0.1), Err(EstimatorError::ChainCountMismatch(1, 2))));
        let short = trace(0.0, &[1.0], &[1.0]);
        assert!(matches!(estimate_susceptibility(&[a.clone()], &[short], "h", "p", 0.1), Err(EstimatorError::DrawCountMismatch(..))));
        let mut no_mix = a.clone();
        no_mix.draws[1].l_mixed = None;
        assert_eq!(estimate_susceptibility(&[no_mix], &[a], "h", "p", 0.1).unwrap_err(), EstimatorError::MissingMixed(0));
    }

    #[test]
    fn controlled_identity_holds() {
        let r = with_tokens(trace(1.0, &[1.1, 0.8, 1.6], &[0.0; 3]), &[&[0.3, 2.0, 1.0], &[0.1, 1.4, 0.6], &[0.9, 3.0, 2.2]]);
        let f = with_tokens(trace(1.0, &[1.3, 1.2, 0.7], &[0.0; 3]), &[&[0.5, 1.0, 1.1], &[0.2, 2.4, 0.3], &[0.8, 1.0, 2.0]]);
        let keys: Vec<TokenKey> = (1..4).map(|p| TokenKey { context: 0, position: p, token: 0 }).collect();
        for dh in [0.0, 0.1, 0.5] {
            let chi = estimate_susceptibility_controlled(&[r.clone()], &[f.clone()], "h", "p", dh).unwrap();
            let pt = estimate_per_token(&[r.clone()], &[f.clone()], &keys, "h", "p").unwrap();
            let res = aggregate_identity_check(&chi, &pt, dh).unwrap();
            assert!(res <= 1e-10 * chi.value.abs().max(1.0), "{res}");
            if dh == 0.0 {
                assert_eq!(chi.value, 0.0);
            }
        }
        let sampled = estimate_susceptibility(&[r.clone()], &[f.clone()], "h", "p", 0.1).unwrap();
        let pt = estimate_per_token(&[r], &[f], &keys, "h", "p").unwrap();
        assert_eq!(aggregate_identity_check(&sampled, &pt, 0.1).unwrap_err(), EstimatorError::NotControlled);
    }

    #[test]
    fn llc_and_finite_difference() {
        let flat = trace(2.0, &[2.0, 2.0], &[2.0, 2.0]);
        assert_eq!(estimate_llc(&[flat], 30.0).unwrap().value, 0.0);
        let t = trace(1.0, &[1.5, 1.25], &[0.0, 0.0]);
        let l30 = estimate_llc(&[t.clone()], 30.0).unwrap();
        let l60 = estimate_llc(&[t], 60.0).unwrap();
        assert_eq!(l60.value, 2.0 * l30.value);
        assert_eq!(finite_diff_susceptibility(&l30, &l30, 30.0, 0.1).unwrap(), 0.0);
        let bigger = LlcEstimate { value: l30.value + 0.9, ..l30.clone() };
        let a = finite_diff_susceptibility(&bigger, &l30, 30.0, 0.1).unwrap();
        let b = finite_diff_susceptibility(&bigger, &l30, 30.0, 0.05).unwrap();
        assert!((b - 2.0 * a).abs() < 1e-15);
        assert_eq!(finite_diff_susceptibility(&bigger, &l30, 30.0, 0.0).unwrap_err(), EstimatorError::ZeroDeltaH);
        assert_eq!(estimate_llc(&[], 30.0).unwrap_err(), EstimatorError::NoChains);
    }

    #[test]
    fn exports() {
        let e = SusceptibilityEstimate {
            value: -0.5,
            per_chain: vec![-0.5],
            std_error: None,
            component: "0:1".into(),
            probe: "code".into(),
            delta_h: 0.1,
            mode: MixMode::Sampled,
        };
        assert_eq!(susceptibilities_to_csv(&[e]), "component,probe,delta_h,value,std_error\n0:1,code,0.1,-0.5,\n");
        let keys = token_keys(&[vec![9, 1, 2], vec![9, 4]]);
        assert_eq!(keys.len(), 3);
        assert_eq!(keys[2], TokenKey { context: 1, position: 1, token: 4 });
        let pt = PerTokenEstimate {
            component: "0:0".into(),
            dataset: "d".into(),
            tokens: keys.iter().map(|k| TokenSusceptibility { key: k.clone(), value: 0.25, std_error: Some(0.1) }).collect(),
            chain_means: vec![],
        };
        let text = per_token_to_jsonl(&pt);
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("{\"dataset\":\"d\",\"component\":\"0:0\",\"context\":0,\"position\":1,\"token\":1,"));
        assert_eq!(per_token_from_jsonl(&text).unwrap(), vec![pt]);
    }
}
