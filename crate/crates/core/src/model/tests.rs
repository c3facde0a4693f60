use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{load_checkpoint, save_checkpoint, ModelMeta, FORMAT_VERSION};
use super::*;
use crate::error::CheckpointError;
use crate::numerics::cross_entropy_grad;

const VOCAB: usize = 9;

fn small() -> Backbone {
    Backbone {
        num_layers: 2,
        hidden_size: 8,
        num_heads: 2,
        max_positions: 64,
    }
}

fn lm(seed: u64) -> Transformer {
    Transformer::new(ModelConfig::lm(small(), VOCAB).unwrap(), seed).unwrap()
}

fn classifier(mask: MaskMode, seed: u64) -> Transformer {
    Transformer::new(ModelConfig::classifier(small(), VOCAB, 3, mask).unwrap(), seed).unwrap()
}

fn random_tokens(rng: &mut ChaCha8Rng, len: usize) -> Vec<TokenId> {
    (0..len).map(|_| rng.gen_range(0..VOCAB as TokenId)).collect()
}

fn meta() -> ModelMeta {
    ModelMeta {
        kind: "lm".into(),
        vocab: "abcdef".into(),
        num_control_tokens: 0,
        class_names: vec![],
    }
}

#[test]
fn config_validation() {
    let mut b = small();
    b.num_heads = 3;
    assert!(matches!(ModelConfig::lm(b, VOCAB), Err(Error::Configuration(_))));
    let mut b = small();
    b.max_positions = L_MAX - 1;
    assert!(ModelConfig::lm(b, VOCAB).is_err());
    assert!(ModelConfig::classifier(small(), VOCAB, 1, MaskMode::Causal).is_err());
    let mut c = ModelConfig::lm(small(), VOCAB).unwrap();
    c.mask_mode = MaskMode::Bidirectional;
    assert!(c.validate().is_err());
}

#[test]
fn head_shapes() {
    let mut k = CostCounters::default();
    let out = lm(1).forward_full(&[BOS_T], &mut k).unwrap();
    assert_eq!((out.rows(), out.cols()), (1, VOCAB));
    let out = lm(1).forward_full(&[0, 3, 4], &mut k).unwrap();
    assert_eq!((out.rows(), out.cols()), (3, VOCAB));
    for mask in [MaskMode::Bidirectional, MaskMode::Causal] {
        let out = classifier(mask, 2).forward_full(&[0, 3, 4], &mut k).unwrap();
        assert_eq!((out.rows(), out.cols()), (1, 3));
    }
}

const BOS_T: TokenId = crate::data::BOS;

#[test]
fn input_errors() {
    let m = lm(1);
    let mut k = CostCounters::default();
    assert!(matches!(
        m.forward_full(&vec![3; 65], &mut k),
        Err(Error::Capacity { len: 65, max: 64 })
    ));
    assert!(matches!(m.forward_full(&[], &mut k), Err(Error::Validation(_))));
    assert!(matches!(m.forward_full(&[VOCAB as TokenId], &mut k), Err(Error::Validation(_))));
    assert_eq!(k, CostCounters::default());
}

#[test]
fn causal_positions_ignore_the_future() {
    let m = lm(3);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut k = CostCounters::default();
    for _ in 0..20 {
        let a = random_tokens(&mut rng, 12);
        let mut b = a.clone();
        let cut = rng.gen_range(0..11);
        for t in &mut b[cut + 1..] {
            *t = rng.gen_range(0..VOCAB as TokenId);
        }
        let (la, lb) = (m.forward_full(&a, &mut k).unwrap(), m.forward_full(&b, &mut k).unwrap());
        for i in 0..=cut {
            assert_eq!(la.row(i), lb.row(i));
        }
    }
}

#[test]
fn bidirectional_positions_see_the_future() {
    let m = classifier(MaskMode::Bidirectional, 4);
    let mut k = CostCounters::default();
    let a = m.contextual_embeddings(&[0, 3, 4, 5], &mut k).unwrap();
    let b = m.contextual_embeddings(&[0, 3, 7, 5], &mut k).unwrap();
    assert_ne!(a.row(0), b.row(0));
    let c = classifier(MaskMode::Causal, 4);
    let a = c.contextual_embeddings(&[0, 3, 4, 5], &mut k).unwrap();
    let b = c.contextual_embeddings(&[0, 3, 7, 5], &mut k).unwrap();
    assert_eq!(a.row(0), b.row(0));
}

#[test]
fn incremental_from_empty_matches_full_exactly() {
    let m = lm(5);
    let mut k = CostCounters::default();
    let mut state = IncrementalState::new(&m.config).unwrap();
    let inc = m.forward_incremental(&mut state, BOS_T, &mut k).unwrap();
    assert_eq!(inc, m.forward_full(&[BOS_T], &mut k).unwrap().data());
    assert_eq!(state.len(), 1);
}

#[test]
fn incremental_matches_full_at_every_step() {
    let m = lm(6);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut k = CostCounters::default();
    for _ in 0..10 {
        let tokens = random_tokens(&mut rng, 30);
        let mut state = IncrementalState::new(&m.config).unwrap();
        for t in 0..tokens.len() {
            let inc = m.forward_incremental(&mut state, tokens[t], &mut k).unwrap();
            let full = m.forward_full(&tokens[..=t], &mut k).unwrap();
            for (a, b) in inc.iter().zip(full.row(t)) {
                assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
            }
        }
    }
}

#[test]
fn prefill_then_extend_matches_full() {
    let m = lm(7);
    let mut k = CostCounters::default();
    let tokens = [0, 4, 5, 6, 3, 8];
    let (mut state, logits) = m.prefill(&tokens[..4], &mut k).unwrap();
    let full = m.forward_full(&tokens, &mut k).unwrap();
    for i in 0..4 {
        assert_eq!(logits.row(i), full.row(i));
    }
    for (i, &t) in tokens.iter().enumerate().skip(4) {
        let inc = m.forward_incremental(&mut state, t, &mut k).unwrap();
        assert_eq!(inc, full.row(i));
    }
}

#[test]
fn classify_all_prefixes_matches_per_prefix_calls() {
    let m = classifier(MaskMode::Causal, 8);
    let mut k = CostCounters::default();
    let tokens = [0, 4, 5, 6, 3];
    let all = m.classify_all_prefixes(&tokens, &mut k).unwrap();
    for t in 0..tokens.len() {
        assert_eq!(all.row(t), m.forward_full(&tokens[..=t], &mut k).unwrap().row(0));
    }
    assert!(matches!(
        classifier(MaskMode::Bidirectional, 8).classify_all_prefixes(&tokens, &mut k),
        Err(Error::Mode(_))
    ));
}

#[test]
fn incremental_requires_causal_mask() {
    let bi = classifier(MaskMode::Bidirectional, 1);
    assert!(matches!(IncrementalState::new(&bi.config), Err(Error::Mode(_))));
    let mut state = IncrementalState::new(&lm(1).config).unwrap();
    assert!(matches!(
        bi.forward_incremental(&mut state, 0, &mut CostCounters::default()),
        Err(Error::Mode(_))
    ));
}

#[test]
fn incremental_capacity_error() {
    let m = lm(1);
    let mut k = CostCounters::default();
    let (mut state, _) = m.prefill(&vec![3; 64], &mut k).unwrap();
    assert!(matches!(
        m.forward_incremental(&mut state, 3, &mut k),
        Err(Error::Capacity { len: 65, max: 64 })
    ));
    assert_eq!(state.len(), 64);
}

#[test]
fn attention_score_counts() {
    let (layers, heads) = (2u64, 2u64);
    let m = lm(1);
    let mut k = CostCounters::default();
    m.forward_full(&[0; 10], &mut k).unwrap();
    assert_eq!(k.attention_scores, layers * heads * 55);
    assert_eq!(k.forward_passes, 1);
    assert_eq!(k.tokens_scored, 10);

    let mut k = CostCounters::default();
    classifier(MaskMode::Bidirectional, 1).forward_full(&[0; 10], &mut k).unwrap();
    assert_eq!(k.attention_scores, layers * heads * 100);

    let (mut state, _) = m.prefill(&[0; 7], &mut CostCounters::default()).unwrap();
    let mut k = CostCounters::default();
    m.forward_incremental(&mut state, 3, &mut k).unwrap();
    assert_eq!(k.attention_scores, layers * heads * 8);
    assert_eq!(k.forward_passes, 1);

    // token-by-token decoding to length t sums to the full causal count
    let mut state = IncrementalState::new(&m.config).unwrap();
    let mut k = CostCounters::default();
    for _ in 0..12 {
        m.forward_incremental(&mut state, 3, &mut k).unwrap();
    }
    assert_eq!(k.attention_scores, m.config.full_pass_scores(12));
}

#[test]
fn forks_are_isolated() {
    let m = lm(9);
    let mut k = CostCounters::default();
    let empty = IncrementalState::new(&m.config).unwrap();
    assert!(fork_state(&empty).is_empty());

    let (base, _) = m.prefill(&[0, 4, 5], &mut k).unwrap();
    let snapshot = base.clone();
    let mut a = fork_state(&base);
    let mut b = fork_state(&base);
    m.forward_incremental(&mut a, 6, &mut k).unwrap();
    m.forward_incremental(&mut a, 7, &mut k).unwrap();
    assert_eq!(base, snapshot);
    let lb = m.forward_incremental(&mut b, 8, &mut k).unwrap();
    assert_eq!(lb, m.forward_full(&[0, 4, 5, 8], &mut k).unwrap().row(3));

    for t in 0..100u32 {
        let tok = t % VOCAB as u32;
        let mut f = fork_state(&base);
        let l = m.forward_incremental(&mut f, tok, &mut k).unwrap();
        assert_eq!(l, m.forward_full(&[0, 4, 5, tok], &mut k).unwrap().row(3));
    }
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let m = classifier(MaskMode::Causal, 11);
    save_checkpoint(&m, &meta(), &path).unwrap();
    let (back, back_meta) = load_checkpoint(&path).unwrap();
    assert_eq!(back.config, m.config);
    assert_eq!(back_meta, meta());
    assert!(back.params.max_abs_diff(&m.params).unwrap() <= 1e-5);
}

fn saved_bytes() -> (tempfile::TempDir, std::path::PathBuf, Vec<u8>) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&lm(12), &meta(), &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    (dir, path, bytes)
}

fn load_kind(path: &std::path::Path, bytes: &[u8]) -> CheckpointError {
    std::fs::write(path, bytes).unwrap();
    match load_checkpoint(path) {
        Err(Error::Checkpoint { kind, .. }) => kind,
        other => panic!("expected checkpoint error, got {other:?}"),
    }
}

#[test]
fn checkpoint_corruption_is_detected() {
    let (_dir, path, bytes) = saved_bytes();
    let mut corrupted = bytes.clone();
    let i = bytes.len() - 40;
    corrupted[i] ^= 0x10;
    assert!(matches!(load_kind(&path, &corrupted), CheckpointError::Checksum { .. }));

    let mut future = bytes.clone();
    future[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    assert_eq!(
        load_kind(&path, &future),
        CheckpointError::Version {
            found: FORMAT_VERSION + 1,
            supported: FORMAT_VERSION
        }
    );

    for cut in [10, 20, bytes.len() - 100, bytes.len() - 1] {
        assert_eq!(load_kind(&path, &bytes[..cut]), CheckpointError::Truncated);
    }
    assert_eq!(load_kind(&path, b"NOTACKPT0000"), CheckpointError::BadMagic);
}

#[test]
fn missing_checkpoint_names_path() {
    let err = load_checkpoint(std::path::Path::new("/nonexistent/x.ckpt")).unwrap_err();
    assert!(matches!(err, Error::Configuration(ref m) if m.contains("/nonexistent/x.ckpt")));
}

#[test]
fn init_is_seeded() {
    assert_eq!(lm(3).params, lm(3).params);
    assert_ne!(lm(3).params, lm(4).params);
    let p = &lm(3).params;
    assert!(p.layers[0].ln1_gain.iter().all(|&g| g == 1.0));
    assert!(p.layers[0].bq.iter().all(|&b| b == 0.0));
    assert_eq!(p.slices().len(), p.decay_mask().len());
}

/// Loss used by the gradient checks: mean token cross-entropy for LM heads,
/// class cross-entropy for classifiers.
fn loss_and_dout(m: &Transformer, tokens: &[TokenId], out: &Matrix) -> (f64, Matrix) {
    let mut d = Matrix::zeros(out.rows(), out.cols());
    let mut loss = 0.0;
    match m.config.head_kind {
        HeadKind::Lm => {
            let n = tokens.len() - 1;
            for i in 0..n {
                let target = tokens[i + 1] as usize;
                loss += crate::numerics::cross_entropy(out.row(i), target).unwrap() / n as f64;
                let g = cross_entropy_grad(out.row(i), target);
                d.row_mut(i).iter_mut().zip(g).for_each(|(a, b)| *a = b / n as f64);
            }
        }
        HeadKind::Classifier => {
            loss = crate::numerics::cross_entropy(out.row(0), 1).unwrap();
            d.row_mut(0).copy_from_slice(&cross_entropy_grad(out.row(0), 1));
        }
    }
    (loss, d)
}

fn gradient_check(mut m: Transformer, tokens: &[TokenId]) {
    let (out, acts) = m.forward_train(tokens).unwrap();
    let (_, dout) = loss_and_dout(&m, tokens, &out);
    let mut grads = ModelParams::zeros(&m.config);
    m.backward(&acts, &dout, &mut grads);

    let analytic: Vec<Vec<f64>> = grads.slices().iter().map(|s| s.to_vec()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let eps = 1e-5;
    for (si, g) in analytic.iter().enumerate() {
        for _ in 0..6 {
            let j = rng.gen_range(0..g.len());
            let orig = m.params.slices()[si][j];
            m.params.slices_mut()[si][j] = orig + eps;
            let (o1, _) = m.forward_train(tokens).unwrap();
            let lp = loss_and_dout(&m, tokens, &o1).0;
            m.params.slices_mut()[si][j] = orig - eps;
            let (o2, _) = m.forward_train(tokens).unwrap();
            let lm_ = loss_and_dout(&m, tokens, &o2).0;
            m.params.slices_mut()[si][j] = orig;
            let numeric = (lp - lm_) / (2.0 * eps);
            let tol = 1e-6 + 1e-4 * numeric.abs().max(g[j].abs());
            assert!(
                (numeric - g[j]).abs() <= tol,
                "tensor {si} index {j}: analytic {} numeric {numeric}",
                g[j]
            );
        }
    }
}

#[test]
fn lm_gradients_match_finite_differences() {
    gradient_check(lm(21), &[0, 3, 5, 4, 8, 1]);
}

#[test]
fn bidirectional_classifier_gradients_match_finite_differences() {
    let mut m = classifier(MaskMode::Bidirectional, 22);
    // larger weights make attention non-uniform so its backward is exercised
    m.params.slices_mut().into_iter().for_each(|s| s.iter_mut().for_each(|v| *v *= 5.0));
    gradient_check(m, &[0, 3, 5, 4, 8]);
}

#[test]
fn causal_classifier_gradients_match_finite_differences() {
    let mut m = classifier(MaskMode::Causal, 23);
    m.params.slices_mut().into_iter().for_each(|s| s.iter_mut().for_each(|v| *v *= 5.0));
    gradient_check(m, &[0, 6, 5, 7]);
}

#[test]
fn training_forward_matches_inference_forward() {
    let m = lm(30);
    let tokens = [0, 3, 4, 5, 6];
    let (train, _) = m.forward_train(&tokens).unwrap();
    let infer = m.forward_full(&tokens, &mut CostCounters::default()).unwrap();
    assert_eq!(train, infer);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn fork_extension_matches_full(prefix in prop::collection::vec(0u32..VOCAB as u32, 1..20),
                                   next in 0u32..VOCAB as u32) {
        let m = lm(40);
        let mut k = CostCounters::default();
        let (state, _) = m.prefill(&prefix, &mut k).unwrap();
        let mut f = fork_state(&state);
        let inc = m.forward_incremental(&mut f, next, &mut k).unwrap();
        let mut all = prefix.clone();
        all.push(next);
        let full = m.forward_full(&all, &mut k).unwrap();
        prop_assert_eq!(&inc[..], full.row(prefix.len()));
        prop_assert_eq!(state.len(), prefix.len());
    }
}
