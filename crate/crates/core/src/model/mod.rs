//! Two-layer attention-only transformer with a hand-written reverse pass.
//!
//! Parameters live in one flat `f64` vector. A [`Layout`] names every
//! contiguous segment of that vector so components (attention heads) can be
//! addressed as index sets. All weight matrices are stored column-major.

mod checkpoint;
mod transformer;

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader};
pub use transformer::Transformer;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("context length {len} outside [2, {max}]")]
    ContextLength { len: usize, max: usize },
    #[error("context must start with bos token {bos}, found {found}")]
    MissingBos { bos: u32, found: u32 },
    #[error("token {token} out of range for vocab of size {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("parameter vector has length {got}, layout expects {expected}")]
    LengthMismatch { got: usize, expected: usize },
    #[error("head ({layer}, {head}) out of range for {n_layers} layers x {n_heads} heads")]
    HeadOutOfRange {
        layer: usize,
        head: usize,
        n_layers: usize,
        n_heads: usize,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

fn default_true() -> bool {
    true
}

fn default_init_std() -> f64 {
    0.02
}

/// Architecture and initialization settings.
///
/// `bos_token` defaults to `vocab_size - 1` when left unset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_len: usize,
    pub d_model: usize,
    #[serde(default = "ModelConfig::default_layers")]
    pub n_layers: usize,
    #[serde(default = "ModelConfig::default_heads")]
    pub n_heads: usize,
    #[serde(default)]
    pub bos_token: Option<u32>,
    /// Pre-attention layer norm in every layer plus a final norm before unembedding.
    #[serde(default = "default_true")]
    pub layernorm: bool,
    /// Reuse the token embedding as the unembedding matrix.
    #[serde(default)]
    pub tied_embeddings: bool,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            context_len: 64,
            d_model: 64,
            n_layers: 2,
            n_heads: 8,
            bos_token: None,
            layernorm: true,
            tied_embeddings: false,
            init_std: 0.02,
            seed: 0,
        }
    }
}

impl ModelConfig {
    fn default_layers() -> usize {
        2
    }

    fn default_heads() -> usize {
        8
    }

    pub fn bos(&self) -> u32 {
        self.bos_token
            .unwrap_or_else(|| self.vocab_size.saturating_sub(1) as u32)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.vocab_size < 2 {
            return bad(format!("vocab_size must be >= 2, got {}", self.vocab_size));
        }
        if self.context_len < 2 {
            return bad(format!("context_len must be >= 2, got {}", self.context_len));
        }
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return bad("d_model, n_layers and n_heads must be nonzero".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.bos() as usize >= self.vocab_size {
            return bad(format!(
                "bos token {} outside vocab of size {}",
                self.bos(),
                self.vocab_size
            ));
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return bad(format!("init_std must be finite and >= 0, got {}", self.init_std));
        }
        Ok(())
    }
}

/// What a segment holds. Used by initialization and by tests that reason
/// about which parameters a loss can touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Embedding,
    Positional,
    Query { layer: usize, head: usize },
    Key { layer: usize, head: usize },
    Value { layer: usize, head: usize },
    Output { layer: usize, head: usize },
    NormGain { layer: Option<usize> },
    NormBias { layer: Option<usize> },
    Unembedding,
}

impl SegmentKind {
    pub fn head(&self) -> Option<(usize, usize)> {
        match *self {
            SegmentKind::Query { layer, head }
            | SegmentKind::Key { layer, head }
            | SegmentKind::Value { layer, head }
            | SegmentKind::Output { layer, head } => Some((layer, head)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub kind: SegmentKind,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Named segment table over the flat parameter vector.
///
/// Segment order: `embed` (d x V), `pos` (d x K), then per layer
/// `[ln.gain, ln.bias]` and per head `q`, `k`, `v` (dh x d) and `o` (d x dh),
/// then `ln_f.gain`, `ln_f.bias` and `unembed` (V x d, absent when tied).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    segments: Vec<Segment>,
    total: usize,
}

impl Layout {
    pub fn for_config(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let dh = config.head_dim();
        let mut segments = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, kind: SegmentKind, rows: usize, cols: usize| {
            segments.push(Segment {
                name,
                kind,
                offset,
                rows,
                cols,
            });
            offset += rows * cols;
        };
        push("embed".into(), SegmentKind::Embedding, d, config.vocab_size);
        push("pos".into(), SegmentKind::Positional, d, config.context_len);
        for layer in 0..config.n_layers {
            if config.layernorm {
                push(
                    format!("l{layer}.ln.gain"),
                    SegmentKind::NormGain { layer: Some(layer) },
                    d,
                    1,
                );
                push(
                    format!("l{layer}.ln.bias"),
                    SegmentKind::NormBias { layer: Some(layer) },
                    d,
                    1,
                );
            }
            for head in 0..config.n_heads {
                push(format!("l{layer}.h{head}.q"), SegmentKind::Query { layer, head }, dh, d);
                push(format!("l{layer}.h{head}.k"), SegmentKind::Key { layer, head }, dh, d);
                push(format!("l{layer}.h{head}.v"), SegmentKind::Value { layer, head }, dh, d);
                push(format!("l{layer}.h{head}.o"), SegmentKind::Output { layer, head }, d, dh);
            }
        }
        if config.layernorm {
            push("ln_f.gain".into(), SegmentKind::NormGain { layer: None }, d, 1);
            push("ln_f.bias".into(), SegmentKind::NormBias { layer: None }, d, 1);
        }
        if !config.tied_embeddings {
            push("unembed".into(), SegmentKind::Unembedding, config.vocab_size, d);
        }
        Ok(Self {
            segments,
            total: offset,
        })
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn get(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    /// Segment name -> (offset, length), the form written into checkpoint headers.
    pub fn offsets(&self) -> BTreeMap<String, (usize, usize)> {
        self.segments
            .iter()
            .map(|s| (s.name.clone(), (s.offset, s.len())))
            .collect()
    }

    /// Segment containing parameter index `i`.
    pub fn segment_of(&self, i: usize) -> Option<&Segment> {
        let idx = self.segments.partition_point(|s| s.offset + s.len() <= i);
        self.segments.get(idx).filter(|s| s.range().contains(&i))
    }
}

/// Flat weight vector together with the layout that names its segments.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub values: Vec<f64>,
    layout: Arc<Layout>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, layout: Arc<Layout>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(ModelError::LengthMismatch {
                got: values.len(),
                expected: layout.len(),
            });
        }
        Ok(Self { values, layout })
    }

    pub fn zeros(layout: Arc<Layout>) -> Self {
        Self {
            values: vec![0.0; layout.len()],
            layout,
        }
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.layout.get(name).map(|s| &self.values[s.range()])
    }

    pub fn segment_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.layout.get(name)?.range();
        Some(&mut self.values[range])
    }
}

/// Boolean selection of parameter indices: the component `C` in `W = U x C`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentMask {
    pub label: String,
    bits: Vec<bool>,
}

impl ComponentMask {
    pub fn new(label: impl Into<String>, bits: Vec<bool>) -> Self {
        Self {
            label: label.into(),
            bits,
        }
    }

    pub fn full(label: impl Into<String>, len: usize) -> Self {
        Self::new(label, vec![true; len])
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn contains(&self, i: usize) -> bool {
        self.bits.get(i).copied().unwrap_or(false)
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, b)| b.then_some(i))
    }

    pub fn is_disjoint(&self, other: &ComponentMask) -> bool {
        self.bits
            .iter()
            .zip(&other.bits)
            .all(|(a, b)| !(*a && *b))
    }
}

/// Label used for head masks, e.g. `"0:3"` for head 3 of layer 0.
pub fn head_label(layer: usize, head: usize) -> String {
    format!("{layer}:{head}")
}

/// Parses `"l:h"` back into `(layer, head)`.
pub fn parse_head_label(label: &str) -> Option<(usize, usize)> {
    let (l, h) = label.split_once(':')?;
    Some((l.trim().parse().ok()?, h.trim().parse().ok()?))
}

/// Draws fresh weights: N(0, init_std^2) for every matrix, unit gains and
/// zero biases for layer norms.
pub fn init_model(config: &ModelConfig) -> Result<ParamVector> {
    let layout = Arc::new(Layout::for_config(config)?);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, config.init_std)
        .map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
    let mut values = vec![0.0; layout.len()];
    for seg in layout.segments() {
        let slot = &mut values[seg.range()];
        match seg.kind {
            SegmentKind::NormGain { .. } => slot.fill(1.0),
            SegmentKind::NormBias { .. } => slot.fill(0.0),
            _ => slot.iter_mut().for_each(|v| *v = normal.sample(&mut rng)),
        }
    }
    ParamVector::new(values, layout)
}

/// Mask selecting exactly the Q/K/V/O segments of one attention head.
pub fn head_mask(config: &ModelConfig, layer: usize, head: usize) -> Result<ComponentMask> {
    if layer >= config.n_layers || head >= config.n_heads {
        return Err(ModelError::HeadOutOfRange {
            layer,
            head,
            n_layers: config.n_layers,
            n_heads: config.n_heads,
        });
    }
    let layout = Layout::for_config(config)?;
    let mut bits = vec![false; layout.len()];
    for seg in layout.segments() {
        if seg.kind.head() == Some((layer, head)) {
            bits[seg.range()].fill(true);
        }
    }
    Ok(ComponentMask::new(head_label(layer, head), bits))
}

/// Token sequences fed to the model. Each must start with the bos token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleBatch {
    pub contexts: Vec<Vec<u32>>,
}

impl SampleBatch {
    pub fn new(contexts: Vec<Vec<u32>>) -> Result<Self> {
        if contexts.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        Ok(Self { contexts })
    }

    pub fn len(&self) -> usize {
        self.contexts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contexts.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_count_matches_architecture_formula() {
        let cfg = ModelConfig::default();
        let (v, k, d, l, h) = (256, 64, 64, 2, 8);
        let dh = d / h;
        let expected = v * d + k * d + l * h * 4 * dh * d + 2 * l * d + 2 * d + v * d;
        assert_eq!(expected, 70016);
        let w = init_model(&cfg).unwrap();
        assert_eq!(w.len(), expected);

        let tied = ModelConfig {
            tied_embeddings: true,
            layernorm: false,
            ..cfg
        };
        let expected_tied = v * d + k * d + l * h * 4 * dh * d;
        assert_eq!(init_model(&tied).unwrap().len(), expected_tied);
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig {
            seed: 7,
            ..Default::default()
        };
        let a = init_model(&cfg).unwrap();
        let b = init_model(&cfg).unwrap();
        assert!(a.values.iter().zip(&b.values).all(|(x, y)| x.to_bits() == y.to_bits()));
        let c = init_model(&ModelConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn indivisible_d_model_is_rejected() {
        let cfg = ModelConfig {
            d_model: 65,
            n_heads: 8,
            ..Default::default()
        };
        assert!(matches!(init_model(&cfg), Err(ModelError::InvalidConfig(_))));
        let zero = ModelConfig {
            d_model: 0,
            ..Default::default()
        };
        assert!(init_model(&zero).is_err());
        let bad_bos = ModelConfig {
            bos_token: Some(256),
            ..Default::default()
        };
        assert!(bad_bos.validate().is_err());
    }

    #[test]
    fn bos_defaults_to_last_token() {
        assert_eq!(ModelConfig::default().bos(), 255);
    }

    #[test]
    fn every_index_belongs_to_one_segment() {
        let cfg = ModelConfig {
            vocab_size: 11,
            context_len: 5,
            d_model: 4,
            n_heads: 2,
            ..Default::default()
        };
        let layout = Layout::for_config(&cfg).unwrap();
        let mut owner = vec![0usize; layout.len()];
        for seg in layout.segments() {
            for i in seg.range() {
                owner[i] += 1;
            }
        }
        assert!(owner.iter().all(|c| *c == 1));
        assert_eq!(layout.segments().iter().map(Segment::len).sum::<usize>(), layout.len());
        for i in [0, 17, layout.len() - 1] {
            assert!(layout.segment_of(i).unwrap().range().contains(&i));
        }
        assert!(layout.segment_of(layout.len()).is_none());
    }

    #[test]
    fn head_masks_are_disjoint_and_sized() {
        let cfg = ModelConfig::default();
        let layout = Layout::for_config(&cfg).unwrap();
        let mut masks = Vec::new();
        for l in 0..2 {
            for h in 0..8 {
                masks.push(head_mask(&cfg, l, h).unwrap());
            }
        }
        let expected = 4 * (cfg.d_model / cfg.n_heads) * cfg.d_model;
        assert_eq!(expected, 2048);
        for (i, a) in masks.iter().enumerate() {
            assert_eq!(a.count(), expected);
            for b in &masks[i + 1..] {
                assert!(a.is_disjoint(b));
            }
            for idx in a.indices() {
                assert!(layout.segment_of(idx).unwrap().kind.head().is_some());
            }
        }
        let embed = layout.get("embed").unwrap();
        assert!(masks.iter().all(|m| embed.range().all(|i| !m.contains(i))));
        assert_eq!(masks[0].label, "0:0");
        assert!(head_mask(&cfg, 2, 0).is_err());
        assert!(head_mask(&cfg, 0, 8).is_err());
    }

    #[test]
    fn head_labels_round_trip() {
        assert_eq!(parse_head_label(&head_label(1, 7)), Some((1, 7)));
        assert_eq!(parse_head_label("full"), None);
    }
}
