use std::sync::Arc;

use nalgebra::{DMatrix, DMatrixView};
use rayon::prelude::*;

use super::{Layout, ModelConfig, ModelError, ParamVector, Result, SampleBatch, SegmentKind};

const LN_EPS: f64 = 1e-5;
// Contexts per parallel work item; fixed so the gradient sum order never changes.
const CONTEXT_CHUNK: usize = 4;

#[derive(Debug, Clone, Copy)]
struct HeadOffsets {
    q: usize,
    k: usize,
    v: usize,
    o: usize,
}

#[derive(Debug, Clone)]
struct LayerOffsets {
    norm: Option<(usize, usize)>,
    heads: Vec<HeadOffsets>,
}

/// Stateless evaluator for one architecture. Weights are passed per call.
#[derive(Debug, Clone)]
pub struct Transformer {
    config: ModelConfig,
    layout: Arc<Layout>,
    embed: usize,
    pos: usize,
    layers: Vec<LayerOffsets>,
    final_norm: Option<(usize, usize)>,
    unembed: Option<usize>,
}

struct NormCache {
    xhat: DMatrix<f64>,
    inv_std: Vec<f64>,
}

struct HeadCache {
    q: DMatrix<f64>,
    k: DMatrix<f64>,
    v: DMatrix<f64>,
    probs: DMatrix<f64>,
    z: DMatrix<f64>,
}

struct LayerCache {
    normed: DMatrix<f64>,
    norm: Option<NormCache>,
    heads: Vec<HeadCache>,
}

struct Forward {
    layers: Vec<LayerCache>,
    features: DMatrix<f64>,
    final_norm: Option<NormCache>,
    logits: DMatrix<f64>,
}

impl Transformer {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let layout = Arc::new(Layout::for_config(&config)?);
        let find = |name: &str| layout.get(name).map(|s| s.offset);
        let offset_of = |name: String| {
            find(&name).ok_or_else(|| ModelError::InvalidConfig(format!("missing segment {name}")))
        };
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let norm = if config.layernorm {
                Some((offset_of(format!("l{l}.ln.gain"))?, offset_of(format!("l{l}.ln.bias"))?))
            } else {
                None
            };
            let heads = (0..config.n_heads)
                .map(|h| {
                    Ok(HeadOffsets {
                        q: offset_of(format!("l{l}.h{h}.q"))?,
                        k: offset_of(format!("l{l}.h{h}.k"))?,
                        v: offset_of(format!("l{l}.h{h}.v"))?,
                        o: offset_of(format!("l{l}.h{h}.o"))?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            layers.push(LayerOffsets { norm, heads });
        }
        let final_norm = if config.layernorm {
            Some((offset_of("ln_f.gain".into())?, offset_of("ln_f.bias".into())?))
        } else {
            None
        };
        let unembed = layout
            .segments()
            .iter()
            .find(|s| s.kind == SegmentKind::Unembedding)
            .map(|s| s.offset);
        Ok(Self {
            embed: offset_of("embed".into())?,
            pos: offset_of("pos".into())?,
            layers,
            final_norm,
            unembed,
            layout,
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn dim(&self) -> usize {
        self.layout.len()
    }

    /// Wraps raw values in a [`ParamVector`] for this architecture.
    pub fn params(&self, values: Vec<f64>) -> Result<ParamVector> {
        ParamVector::new(values, self.layout.clone())
    }

    pub fn validate_context(&self, context: &[u32]) -> Result<()> {
        let max = self.config.context_len;
        if context.len() < 2 || context.len() > max {
            return Err(ModelError::ContextLength {
                len: context.len(),
                max,
            });
        }
        let bos = self.config.bos();
        if context[0] != bos {
            return Err(ModelError::MissingBos {
                bos,
                found: context[0],
            });
        }
        if let Some(&token) = context
            .iter()
            .find(|t| **t as usize >= self.config.vocab_size)
        {
            return Err(ModelError::TokenOutOfRange {
                token,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn check_len(&self, w: &[f64]) -> Result<()> {
        if w.len() != self.dim() {
            return Err(ModelError::LengthMismatch {
                got: w.len(),
                expected: self.dim(),
            });
        }
        Ok(())
    }

    fn mat<'a>(&self, w: &'a [f64], offset: usize, rows: usize, cols: usize) -> DMatrixView<'a, f64> {
        DMatrixView::from_slice(&w[offset..offset + rows * cols], rows, cols)
    }

    /// Negative log-likelihood of each next token: entry `k` is the loss of
    /// predicting `context[k + 1]` from `context[..=k]`.
    pub fn per_token_losses(&self, w: &[f64], context: &[u32]) -> Result<Vec<f64>> {
        self.check_len(w)?;
        self.validate_context(context)?;
        let fwd = self.forward(w, context);
        Ok(token_nll(&fwd.logits, context))
    }

    /// Mean over contexts of the mean per-token loss.
    pub fn batch_loss(&self, w: &[f64], batch: &SampleBatch) -> Result<f64> {
        self.check_len(w)?;
        if batch.contexts.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        for c in &batch.contexts {
            self.validate_context(c)?;
        }
        let per_context: Vec<f64> = batch
            .contexts
            .par_iter()
            .map(|c| {
                let fwd = self.forward(w, c);
                mean(&token_nll(&fwd.logits, c))
            })
            .collect();
        Ok(per_context.iter().sum::<f64>() / batch.len() as f64)
    }

    /// Batch loss and its gradient, written into `grad` (overwritten).
    pub fn loss_and_grad(&self, w: &[f64], batch: &SampleBatch, grad: &mut [f64]) -> Result<f64> {
        self.check_len(w)?;
        self.check_len(grad)?;
        if batch.contexts.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        for c in &batch.contexts {
            self.validate_context(c)?;
        }
        let n = batch.len() as f64;
        let partials: Vec<(Vec<f64>, Vec<f64>)> = batch
            .contexts
            .par_chunks(CONTEXT_CHUNK)
            .map(|chunk| {
                let mut g = vec![0.0; self.dim()];
                let mut losses = Vec::with_capacity(chunk.len());
                for c in chunk {
                    let fwd = self.forward(w, c);
                    let scale = 1.0 / ((c.len() - 1) as f64 * n);
                    losses.push(mean(&token_nll(&fwd.logits, c)));
                    self.backward(w, c, &fwd, scale, &mut g);
                }
                (losses, g)
            })
            .collect();
        grad.fill(0.0);
        let mut per_context = Vec::with_capacity(batch.len());
        for (l, g) in partials {
            per_context.extend(l);
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        // summed in the same order as `batch_loss`, so equal batches give equal bits
        Ok(per_context.iter().sum::<f64>() / n)
    }

    pub fn grad_batch_loss(&self, w: &ParamVector, batch: &SampleBatch) -> Result<ParamVector> {
        let mut grad = vec![0.0; self.dim()];
        self.loss_and_grad(&w.values, batch, &mut grad)?;
        self.params(grad)
    }

    fn forward(&self, w: &[f64], context: &[u32]) -> Forward {
        let cfg = &self.config;
        let (d, m, dh) = (cfg.d_model, context.len(), cfg.head_dim());
        let embed = self.mat(w, self.embed, d, cfg.vocab_size);
        let pos = self.mat(w, self.pos, d, cfg.context_len);
        let mut x = DMatrix::zeros(d, m);
        for (i, &t) in context.iter().enumerate() {
            let col = embed.column(t as usize) + pos.column(i);
            x.set_column(i, &col);
        }
        let scale = 1.0 / (dh as f64).sqrt();
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (normed, norm) = match layer.norm {
                Some((g, b)) => {
                    let (y, cache) = layer_norm(&x, &w[g..g + d], &w[b..b + d]);
                    (y, Some(cache))
                }
                None => (x.clone(), None),
            };
            let mut out = DMatrix::zeros(d, m);
            let mut heads = Vec::with_capacity(layer.heads.len());
            for h in &layer.heads {
                let q = self.mat(w, h.q, dh, d) * &normed;
                let k = self.mat(w, h.k, dh, d) * &normed;
                let v = self.mat(w, h.v, dh, d) * &normed;
                let mut probs = q.transpose() * &k;
                causal_softmax(&mut probs, scale);
                let z = &v * probs.transpose();
                out += self.mat(w, h.o, d, dh) * &z;
                heads.push(HeadCache { q, k, v, probs, z });
            }
            x += out;
            layers.push(LayerCache {
                normed,
                norm,
                heads,
            });
        }
        let (features, final_norm) = match self.final_norm {
            Some((g, b)) => {
                let (y, cache) = layer_norm(&x, &w[g..g + d], &w[b..b + d]);
                (y, Some(cache))
            }
            None => (x, None),
        };
        let logits = match self.unembed {
            Some(u) => self.mat(w, u, cfg.vocab_size, d) * &features,
            None => embed.transpose() * &features,
        };
        Forward {
            layers,
            features,
            final_norm,
            logits,
        }
    }

    /// Accumulates `scale * d(sum of token losses)/dw` into `grad`.
    fn backward(&self, w: &[f64], context: &[u32], fwd: &Forward, scale: f64, grad: &mut [f64]) {
        let cfg = &self.config;
        let (d, m, dh, vocab) = (cfg.d_model, context.len(), cfg.head_dim(), cfg.vocab_size);
        let mut dlogits = DMatrix::zeros(vocab, m);
        for i in 0..m - 1 {
            let col = fwd.logits.column(i);
            let max = col.max();
            let z: f64 = col.iter().map(|v| (v - max).exp()).sum();
            for r in 0..vocab {
                dlogits[(r, i)] = scale * (col[r] - max).exp() / z;
            }
            dlogits[(context[i + 1] as usize, i)] -= scale;
        }
        let mut dfeat = match self.unembed {
            Some(u) => {
                let du = &dlogits * fwd.features.transpose();
                accumulate(grad, u, &du);
                self.mat(w, u, vocab, d).transpose() * &dlogits
            }
            None => {
                let de = &fwd.features * dlogits.transpose();
                accumulate(grad, self.embed, &de);
                self.mat(w, self.embed, d, vocab) * &dlogits
            }
        };
        let mut dx = match (self.final_norm, &fwd.final_norm) {
            (Some((g, b)), Some(cache)) => layer_norm_backward(&dfeat, cache, &w[g..g + d], g, b, grad),
            _ => std::mem::replace(&mut dfeat, DMatrix::zeros(0, 0)),
        };
        let scale_attn = 1.0 / (dh as f64).sqrt();
        for (layer, cache) in self.layers.iter().zip(&fwd.layers).rev() {
            let mut dnormed = DMatrix::zeros(d, m);
            for (h, hc) in layer.heads.iter().zip(&cache.heads) {
                let wo = self.mat(w, h.o, d, dh);
                accumulate(grad, h.o, &(&dx * hc.z.transpose()));
                let dz = wo.transpose() * &dx;
                let dv = &dz * &hc.probs;
                let dp = dz.transpose() * &hc.v;
                let ds = softmax_backward(&hc.probs, &dp, scale_attn);
                let dq = &hc.k * ds.transpose();
                let dk = &hc.q * &ds;
                let normed_t = cache.normed.transpose();
                accumulate(grad, h.q, &(&dq * &normed_t));
                accumulate(grad, h.k, &(&dk * &normed_t));
                accumulate(grad, h.v, &(&dv * &normed_t));
                dnormed += self.mat(w, h.q, dh, d).transpose() * &dq;
                dnormed += self.mat(w, h.k, dh, d).transpose() * &dk;
                dnormed += self.mat(w, h.v, dh, d).transpose() * &dv;
            }
            match (layer.norm, &cache.norm) {
                (Some((g, b)), Some(nc)) => {
                    dx += layer_norm_backward(&dnormed, nc, &w[g..g + d], g, b, grad);
                }
                _ => dx += dnormed,
            }
        }
        for (i, &t) in context.iter().enumerate() {
            let col = dx.column(i);
            let e = self.embed + t as usize * d;
            let p = self.pos + i * d;
            for r in 0..d {
                grad[e + r] += col[r];
                grad[p + r] += col[r];
            }
        }
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn token_nll(logits: &DMatrix<f64>, context: &[u32]) -> Vec<f64> {
    (0..context.len() - 1)
        .map(|i| {
            let col = logits.column(i);
            let max = col.max();
            let lse = max + col.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - col[context[i + 1] as usize]
        })
        .collect()
}

fn accumulate(grad: &mut [f64], offset: usize, m: &DMatrix<f64>) {
    let src = m.as_slice();
    grad[offset..offset + src.len()]
        .iter_mut()
        .zip(src)
        .for_each(|(g, s)| *g += s);
}

/// Row-wise softmax of `scale * scores` over keys `j <= i`; masked entries become 0.
fn causal_softmax(scores: &mut DMatrix<f64>, scale: f64) {
    let m = scores.nrows();
    for i in 0..m {
        let mut max = f64::NEG_INFINITY;
        for j in 0..=i {
            max = max.max(scale * scores[(i, j)]);
        }
        let mut sum = 0.0;
        for j in 0..=i {
            let e = (scale * scores[(i, j)] - max).exp();
            scores[(i, j)] = e;
            sum += e;
        }
        for j in 0..m {
            if j <= i {
                scores[(i, j)] /= sum;
            } else {
                scores[(i, j)] = 0.0;
            }
        }
    }
}

/// Gradient w.r.t. the unscaled scores given `probs` and upstream `dprobs`.
fn softmax_backward(probs: &DMatrix<f64>, dprobs: &DMatrix<f64>, scale: f64) -> DMatrix<f64> {
    let m = probs.nrows();
    let mut ds = DMatrix::zeros(m, m);
    for i in 0..m {
        let dot: f64 = (0..=i).map(|j| probs[(i, j)] * dprobs[(i, j)]).sum();
        for j in 0..=i {
            ds[(i, j)] = scale * probs[(i, j)] * (dprobs[(i, j)] - dot);
        }
    }
    ds
}

fn layer_norm(x: &DMatrix<f64>, gain: &[f64], bias: &[f64]) -> (DMatrix<f64>, NormCache) {
    let (d, m) = x.shape();
    let mut xhat = DMatrix::zeros(d, m);
    let mut y = DMatrix::zeros(d, m);
    let mut inv_std = Vec::with_capacity(m);
    for i in 0..m {
        let col = x.column(i);
        let mu = col.sum() / d as f64;
        let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        for r in 0..d {
            let h = (col[r] - mu) * is;
            xhat[(r, i)] = h;
            y[(r, i)] = gain[r] * h + bias[r];
        }
        inv_std.push(is);
    }
    (y, NormCache { xhat, inv_std })
}

fn layer_norm_backward(
    dy: &DMatrix<f64>,
    cache: &NormCache,
    gain: &[f64],
    gain_offset: usize,
    bias_offset: usize,
    grad: &mut [f64],
) -> DMatrix<f64> {
    let (d, m) = dy.shape();
    let mut dx = DMatrix::zeros(d, m);
    let mut dxhat = vec![0.0; d];
    for i in 0..m {
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for r in 0..d {
            let g = dy[(r, i)];
            let h = cache.xhat[(r, i)];
            grad[gain_offset + r] += g * h;
            grad[bias_offset + r] += g;
            dxhat[r] = g * gain[r];
            mean_dxhat += dxhat[r];
            mean_dxhat_xhat += dxhat[r] * h;
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        for r in 0..d {
            dx[(r, i)] = cache.inv_std[i] * (dxhat[r] - mean_dxhat - cache.xhat[(r, i)] * mean_dxhat_xhat);
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    fn tiny(layernorm: bool, tied: bool) -> ModelConfig {
        ModelConfig {
            vocab_size: 7,
            context_len: 6,
            d_model: 4,
            n_layers: 2,
            n_heads: 2,
            bos_token: None,
            layernorm,
            tied_embeddings: tied,
            init_std: 0.5,
            seed: 3,
        }
    }

    #[test]
    fn zero_weights_give_uniform_loss() {
        let cfg = ModelConfig {
            layernorm: false,
            ..ModelConfig::default()
        };
        let model = Transformer::new(cfg.clone()).unwrap();
        let w = vec![0.0; model.dim()];
        let ctx = vec![255, 3, 9, 12, 200];
        let losses = model.per_token_losses(&w, &ctx).unwrap();
        assert_eq!(losses.len(), ctx.len() - 1);
        for l in &losses {
            assert!((l - (256f64).ln()).abs() < 1e-12);
        }
        let batch = SampleBatch::new(vec![ctx.clone()]).unwrap();
        assert!((model.batch_loss(&w, &batch).unwrap() - (256f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn causal_masking_holds() {
        let model = Transformer::new(tiny(true, false)).unwrap();
        let w = init_model(model.config()).unwrap().values;
        let a = vec![6, 1, 2, 3, 4, 5];
        let base = model.per_token_losses(&w, &a).unwrap();
        for k in 0..base.len() {
            // change tokens strictly after position k + 1 (the predicted one)
            let mut b = a.clone();
            for t in b.iter_mut().skip(k + 2) {
                *t = (*t + 1) % 6;
            }
            let other = model.per_token_losses(&w, &b).unwrap();
            for j in 0..=k {
                assert_eq!(base[j].to_bits(), other[j].to_bits(), "position {j} changed");
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut s = DMatrix::from_fn(5, 5, |i, j| (i as f64 * 0.7 - j as f64 * 1.3).sin() * 4.0);
        causal_softmax(&mut s, 0.5);
        for i in 0..5 {
            let row: f64 = (0..5).map(|j| s[(i, j)]).sum();
            assert!((row - 1.0).abs() < 1e-12);
            for j in i + 1..5 {
                assert_eq!(s[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn invalid_contexts_are_rejected() {
        let model = Transformer::new(tiny(true, false)).unwrap();
        let w = vec![0.0; model.dim()];
        assert!(matches!(
            model.per_token_losses(&w, &[6]),
            Err(ModelError::ContextLength { .. })
        ));
        assert!(matches!(
            model.per_token_losses(&w, &[6, 1, 1, 1, 1, 1, 1]),
            Err(ModelError::ContextLength { .. })
        ));
        assert!(matches!(
            model.per_token_losses(&w, &[1, 2]),
            Err(ModelError::MissingBos { .. })
        ));
        assert!(matches!(
            model.per_token_losses(&w, &[6, 7]),
            Err(ModelError::TokenOutOfRange { .. })
        ));
    }

    #[test]
    fn batch_loss_averages_contexts() {
        let model = Transformer::new(tiny(true, false)).unwrap();
        let w = init_model(model.config()).unwrap().values;
        let a = vec![6, 1, 2, 3];
        let b = vec![6, 4, 4, 0, 5, 2];
        let one = model.batch_loss(&w, &SampleBatch::new(vec![a.clone()]).unwrap()).unwrap();
        let two = model
            .batch_loss(&w, &SampleBatch::new(vec![a.clone(), a.clone()]).unwrap())
            .unwrap();
        assert!((one - two).abs() < 1e-15);
        let la = mean(&model.per_token_losses(&w, &a).unwrap());
        let lb = mean(&model.per_token_losses(&w, &b).unwrap());
        let ab = model
            .batch_loss(&w, &SampleBatch::new(vec![a.clone(), b.clone()]).unwrap())
            .unwrap();
        let ba = model.batch_loss(&w, &SampleBatch::new(vec![b, a]).unwrap()).unwrap();
        assert!((ab - 0.5 * (la + lb)).abs() < 1e-14);
        assert!((ab - ba).abs() < 1e-15);
    }

    #[test]
    fn gradient_is_deterministic_and_matches_loss() {
        for (ln, tied) in [(true, false), (false, true)] {
            let model = Transformer::new(tiny(ln, tied)).unwrap();
            let w = init_model(model.config()).unwrap().values;
            let batch = SampleBatch::new(vec![vec![6, 1, 2, 3, 1, 2], vec![6, 0, 0, 5]]).unwrap();
            let mut g1 = vec![0.0; model.dim()];
            let mut g2 = vec![0.0; model.dim()];
            let l1 = model.loss_and_grad(&w, &batch, &mut g1).unwrap();
            let l2 = model.loss_and_grad(&w, &batch, &mut g2).unwrap();
            assert_eq!(l1.to_bits(), l2.to_bits());
            assert!(g1.iter().zip(&g2).all(|(a, b)| a.to_bits() == b.to_bits()));
            assert!((l1 - model.batch_loss(&w, &batch).unwrap()).abs() < 1e-14);
        }
    }
}
