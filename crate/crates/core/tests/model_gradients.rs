use proptest::prelude::*;
use suscept::model::{init_model, ModelConfig, SampleBatch, Transformer};

fn col_major(rows: &[&[f64]]) -> Vec<f64> {
    let (r, c) = (rows.len(), rows[0].len());
    (0..c).flat_map(|j| (0..r).map(move |i| rows[i][j])).collect()
}

/// 1 layer, 1 head, d_model 2, vocab 3; reference numbers come from an
/// independent numpy forward pass over the same weights.
#[test]
fn micro_model_matches_reference_cross_entropy() {
    let cfg = ModelConfig {
        vocab_size: 3,
        context_len: 3,
        d_model: 2,
        n_layers: 1,
        n_heads: 1,
        bos_token: None,
        layernorm: false,
        tied_embeddings: false,
        init_std: 0.02,
        seed: 0,
    };
    let model = Transformer::new(cfg).unwrap();
    let mut w = Vec::new();
    w.extend(col_major(&[&[0.5, -0.3, 0.1], &[0.2, 0.4, -0.6]]));
    w.extend(col_major(&[&[0.1, 0.0, -0.2], &[0.0, 0.3, 0.1]]));
    w.extend(col_major(&[&[0.7, -0.1], &[0.2, 0.5]]));
    w.extend(col_major(&[&[-0.4, 0.3], &[0.6, 0.1]]));
    w.extend(col_major(&[&[0.3, 0.8], &[-0.5, 0.2]]));
    w.extend(col_major(&[&[1.1, -0.2], &[0.4, 0.9]]));
    w.extend(col_major(&[&[0.9, -0.7], &[-0.3, 0.6], &[0.2, 0.25]]));
    assert_eq!(w.len(), model.dim());

    let ctx = vec![2, 0, 1];
    let losses = model.per_token_losses(&w, &ctx).unwrap();
    assert!((losses[0] - 0.6072116291445236).abs() < 1e-12);
    assert!((losses[1] - 1.2626213198706588).abs() < 1e-12);
    let batch = SampleBatch::new(vec![ctx]).unwrap();
    assert!((model.batch_loss(&w, &batch).unwrap() - 0.9349164745075913).abs() < 1e-12);
}

fn micro_config(seed: u64, layernorm: bool, tied: bool) -> ModelConfig {
    ModelConfig {
        vocab_size: 6,
        context_len: 5,
        d_model: 4,
        n_layers: 2,
        n_heads: 2,
        bos_token: None,
        layernorm,
        tied_embeddings: tied,
        init_std: 0.6,
        seed,
    }
}

/// Largest |g - fd| / max(|g|, |fd|, 1e-3) over all coordinates.
fn max_fd_error(model: &Transformer, w: &[f64], batch: &SampleBatch) -> f64 {
    let mut grad = vec![0.0; model.dim()];
    model.loss_and_grad(w, batch, &mut grad).unwrap();
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    let mut probe = w.to_vec();
    for i in 0..w.len() {
        probe[i] = w[i] + h;
        let up = model.batch_loss(&probe, batch).unwrap();
        probe[i] = w[i] - h;
        let down = model.batch_loss(&probe, batch).unwrap();
        probe[i] = w[i];
        let fd = (up - down) / (2.0 * h);
        let denom = grad[i].abs().max(fd.abs()).max(1e-3);
        worst = worst.max((grad[i] - fd).abs() / denom);
    }
    worst
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]
    #[test]
    fn gradient_matches_central_differences(
        seed in 0u64..1000,
        layernorm in any::<bool>(),
        tied in any::<bool>(),
        tokens in prop::collection::vec(prop::collection::vec(0u32..5, 1..5), 1..4),
    ) {
        let cfg = micro_config(seed, layernorm, tied);
        let model = Transformer::new(cfg.clone()).unwrap();
        let w = init_model(&cfg).unwrap().values;
        let contexts = tokens
            .into_iter()
            .map(|mut t| { t.insert(0, cfg.bos()); t })
            .collect();
        let batch = SampleBatch::new(contexts).unwrap();
        let err = max_fd_error(&model, &w, &batch);
        prop_assert!(err < 1e-4, "relative error {err}");
    }
}

#[test]
fn unused_embeddings_get_zero_gradient() {
    let cfg = micro_config(5, true, false);
    let model = Transformer::new(cfg.clone()).unwrap();
    let w = init_model(&cfg).unwrap();
    // token 4 never appears and positions 3.. are never used
    let batch = SampleBatch::new(vec![vec![5, 0, 1], vec![5, 2, 2]]).unwrap();
    let g = model.grad_batch_loss(&w, &batch).unwrap();
    let embed = g.segment("embed").unwrap();
    assert!(embed[4 * 4..5 * 4].iter().all(|v| *v == 0.0));
    assert!(embed[0..4].iter().any(|v| *v != 0.0));
    let pos = g.segment("pos").unwrap();
    assert!(pos[3 * 4..].iter().all(|v| *v == 0.0));
}

#[test]
fn loss_paths_agree_bit_for_bit() {
    let cfg = micro_config(9, true, false);
    let model = Transformer::new(cfg.clone()).unwrap();
    let w = init_model(&cfg).unwrap().values;
    let contexts = (0..37u32).map(|i| vec![5, i % 5, (i * 3) % 5, (i * 7) % 5]).collect();
    let batch = SampleBatch::new(contexts).unwrap();
    let mut grad = vec![0.0; model.dim()];
    let with_grad = model.loss_and_grad(&w, &batch, &mut grad).unwrap();
    assert_eq!(with_grad.to_bits(), model.batch_loss(&w, &batch).unwrap().to_bits());
}
