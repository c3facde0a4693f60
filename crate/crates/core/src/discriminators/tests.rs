use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::{Backbone, ModelConfig};

const VOCAB: usize = 8;

fn backbone() -> Backbone {
    Backbone {
        num_layers: 2,
        hidden_size: 8,
        num_heads: 2,
        max_positions: 64,
    }
}

fn classifier(mask: MaskMode, seed: u64) -> Transformer {
    let mut m =
        Transformer::new(ModelConfig::classifier(backbone(), VOCAB, 2, mask).unwrap(), seed).unwrap();
    // widen the random head so posteriors are far from uniform
    m.params.head_w.data_mut().iter_mut().for_each(|v| *v *= 50.0);
    m
}

fn cclm(seed: u64, classes: usize) -> Gedi<CcLm> {
    let cfg = ModelConfig::lm(backbone(), VOCAB + classes).unwrap();
    let mut m = Transformer::new(cfg, seed).unwrap();
    m.params.head_w.data_mut().iter_mut().for_each(|v| *v *= 50.0);
    Gedi::new(CcLm::new(m, classes).unwrap())
}

fn assert_close(a: &ClassPosterior, b: &ClassPosterior, tol: f64) {
    for (x, y) in a.probs().iter().zip(b.probs()) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

/// Class-conditional bigram model: `table[c][prev][next]` log-probabilities.
struct Bigram {
    table: Vec<Vec<Vec<f64>>>,
}

impl Bigram {
    fn random(classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = (0..classes)
            .map(|_| {
                (0..VOCAB)
                    .map(|_| {
                        let w: Vec<f64> = (0..VOCAB).map(|_| rng.gen_range(0.05..1.0)).collect();
                        let s: f64 = w.iter().sum();
                        w.iter().map(|x| (x / s).ln()).collect()
                    })
                    .collect()
            })
            .collect();
        Self { table }
    }
}

impl ClassConditionalLm for Bigram {
    type Cache = (usize, TokenId, usize);

    fn num_classes(&self) -> usize {
        self.table.len()
    }

    fn vocab_size(&self) -> usize {
        VOCAB
    }

    fn start(
        &self,
        class: usize,
        context: &[TokenId],
        counters: &mut CostCounters,
    ) -> Result<(Self::Cache, Vec<f64>, f64)> {
        counters.forward_passes += 1;
        let t = &self.table[class];
        let ll = context.windows(2).map(|w| t[w[0] as usize][w[1] as usize]).sum();
        let last = *context.last().unwrap();
        Ok(((class, last, context.len()), t[last as usize].clone(), ll))
    }

    fn extend(
        &self,
        cache: &mut Self::Cache,
        token: TokenId,
        counters: &mut CostCounters,
    ) -> Result<Vec<f64>> {
        counters.forward_passes += 1;
        cache.1 = token;
        cache.2 += 1;
        Ok(self.table[cache.0][token as usize].clone())
    }

    fn cache_len(cache: &Self::Cache) -> usize {
        cache.2
    }
}

/// Exhaustive Bayes with a uniform prior, in probability space.
fn bayes_oracle(b: &Bigram, seq: &[TokenId]) -> Vec<f64> {
    let joint: Vec<f64> = b
        .table
        .iter()
        .map(|t| seq.windows(2).map(|w| t[w[0] as usize][w[1] as usize].exp()).product::<f64>())
        .collect();
    let z: f64 = joint.iter().sum();
    joint.iter().map(|j| j / z).collect()
}

#[test]
fn posterior_closed_forms() {
    let g = Gedi::new(Bigram::random(2, 0));
    assert_close(&g.posterior_from(&[-3.0, -3.0]), &ClassPosterior::uniform(2), 1e-15);
    let p = g.posterior_from(&[-10.0, -10.0 + 3f64.ln()]);
    assert!((p.prob(0) - 0.25).abs() < 1e-12 && (p.prob(1) - 0.75).abs() < 1e-12);
    let g = Gedi::with_log_prior(Bigram::random(2, 0), vec![3f64.ln(), 0.0]).unwrap();
    let p = g.posterior_from(&[-10.0, -10.0 + 3f64.ln()]);
    assert!((p.prob(0) - 0.5).abs() < 1e-12);
    assert!(Gedi::with_log_prior(Bigram::random(2, 0), vec![0.0]).is_err());
}

#[test]
fn sequential_gedi_matches_exhaustive_bayes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for classes in [2, 3, 4] {
        let g = Gedi::new(Bigram::random(classes, classes as u64));
        for _ in 0..20 {
            let seq: Vec<TokenId> = std::iter::once(BOS)
                .chain((0..12).map(|_| rng.gen_range(3..VOCAB as TokenId)))
                .collect();
            let mut k = CostCounters::default();
            let (mut state, p0) = g.start_state(&seq[..1], &mut k).unwrap();
            assert_close(&p0, &ClassPosterior::uniform(classes), 1e-12);
            for t in 1..seq.len() {
                let p = gedi_class_posterior(&g, &mut state, seq[t], &mut k).unwrap();
                let oracle = bayes_oracle(&g.lm, &seq[..=t]);
                assert_close(&p, &ClassPosterior::new(oracle).unwrap(), 1e-9);
            }
        }
    }
}

#[test]
fn gedi_costs_num_classes_forwards_per_token() {
    let g = Gedi::new(Bigram::random(3, 1));
    let mut k = CostCounters::default();
    let (mut state, _) = g.start_state(&[BOS], &mut k).unwrap();
    assert_eq!(k.forward_passes, 3);
    // the first token reuses the distributions computed by `start`
    gedi_class_posterior(&g, &mut state, 4, &mut k).unwrap();
    assert_eq!(k.forward_passes, 3);
    for t in [5, 6, 3] {
        let before = k.forward_passes;
        gedi_class_posterior(&g, &mut state, t, &mut k).unwrap();
        assert_eq!(k.forward_passes - before, 3);
    }
}

#[test]
fn gedi_children_match_naive_per_candidate_scoring() {
    let g = cclm(3, 2);
    let context = [BOS, 4, 6, 5];
    let (mut state, _) = g.start_state(&context[..3], &mut CostCounters::default()).unwrap();
    let (mut state, _) = g.extend_state(&mut state, 5, &mut CostCounters::default()).unwrap();
    let candidates: Vec<TokenId> = (0..VOCAB as TokenId).collect();
    let fast = score_children(&g, &mut state, &context, &candidates).unwrap();
    assert_eq!(fast.cost.forward_passes, 2);

    let mut naive_cost = CostCounters::default();
    for (v, posterior) in &fast.scores {
        let mut seq = context.to_vec();
        seq.push(*v);
        let (_, naive) = g.start_state(&seq, &mut naive_cost).unwrap();
        assert_close(posterior, &naive, 1e-9);
    }
    assert_eq!(naive_cost.forward_passes, (2 * VOCAB) as u64);
    // a second request for the same parent is free
    let again = score_children(&g, &mut state, &context, &candidates).unwrap();
    assert_eq!(again.cost, CostCounters::default());
    assert_eq!(again.scores, fast.scores);
}

#[test]
fn gedi_prefix_posteriors_match_sequential_updates() {
    let g = cclm(4, 3);
    let seq = [BOS, 3, 7, 4, 4, 1];
    let mut k = CostCounters::default();
    let all = g.prefix_posteriors(&seq, &mut k).unwrap();
    assert_eq!(k.forward_passes, 3);
    let (mut state, p0) = g.start_state(&seq[..1], &mut k).unwrap();
    assert_close(&all[0], &p0, 1e-12);
    for t in 1..seq.len() {
        let p = gedi_class_posterior(&g, &mut state, seq[t], &mut k).unwrap();
        assert_close(&all[t], &p, 1e-9);
    }
}

#[test]
fn bidirectional_zero_head_is_uniform() {
    let mut m = classifier(MaskMode::Bidirectional, 1);
    m.params.head_w.data_mut().fill(0.0);
    let p = score_sequence_bidirectional(&m, &[BOS, 4, 5], &mut CostCounters::default()).unwrap();
    assert_eq!(p.probs(), &[0.5, 0.5]);
}

#[test]
fn wrong_configuration_is_rejected() {
    let bi = classifier(MaskMode::Bidirectional, 1);
    let uni = classifier(MaskMode::Causal, 1);
    let mut k = CostCounters::default();
    assert!(matches!(
        score_sequence_bidirectional(&uni, &[BOS], &mut k),
        Err(Error::Configuration(_))
    ));
    assert!(Discriminator::unidirectional(bi.clone()).is_err());
    assert!(Discriminator::bidirectional(uni).is_err());
    assert!(Discriminator::generative(bi, 2).is_err());
}

#[test]
fn unidirectional_token_by_token_matches_one_shot() {
    let m = classifier(MaskMode::Causal, 2);
    let seq = [BOS, 3, 5, 7, 4, 6];
    let mut k = CostCounters::default();
    let mut state = IncrementalState::new(&m.config).unwrap();
    for t in 0..seq.len() {
        let before = k;
        let p = score_sequence_unidirectional(&m, &mut state, seq[t], &mut k).unwrap();
        let step = k.since(&before);
        assert_eq!(step.forward_passes, 1);
        assert_eq!(step.attention_scores, 4 * (t as u64 + 1));
        let full = m.forward_full(&seq[..=t], &mut CostCounters::default()).unwrap();
        assert_close(&p, &ClassPosterior::from_log_scores(full.row(0)), 1e-9);
    }
    assert_eq!(k.attention_scores, m.config.full_pass_scores(seq.len() as u64));
}

#[test]
fn children_costs_per_family() {
    let candidates: Vec<TokenId> = vec![3, 4, 5, 6, 7];
    let context = [BOS, 4, 4];
    for d in [
        Discriminator::bidirectional(classifier(MaskMode::Bidirectional, 3)).unwrap(),
        Discriminator::unidirectional(classifier(MaskMode::Causal, 3)).unwrap(),
    ] {
        let (mut state, _) = d.start(&context, &mut CostCounters::default()).unwrap();
        let out = score_children(&d, &mut state, &context, &candidates).unwrap();
        assert_eq!(out.cost.forward_passes, 5);
        let t = context.len() as u64 + 1;
        let per_call = match d.family() {
            Family::Bidirectional => 4 * t * t,
            _ => 4 * t,
        };
        assert_eq!(out.cost.attention_scores, 5 * per_call);
        for (v, p) in &out.scores {
            let mut seq = context.to_vec();
            seq.push(*v);
            assert_close(p, &d.posterior(&seq, &mut CostCounters::default()).unwrap(), 1e-9);
        }
        let empty = score_children(&d, &mut state, &context, &[]).unwrap();
        assert!(empty.scores.is_empty());
        assert_eq!(empty.cost, CostCounters::default());
        assert!(matches!(
            score_children(&d, &mut state, &context, &[VOCAB as TokenId]),
            Err(Error::Validation(_))
        ));
    }
}

#[test]
fn prefix_posteriors_agree_with_whole_sequence_scoring() {
    let seq = [BOS, 3, 6, 6, 5];
    let discs = [
        Discriminator::bidirectional(classifier(MaskMode::Bidirectional, 7)).unwrap(),
        Discriminator::unidirectional(classifier(MaskMode::Causal, 7)).unwrap(),
        Discriminator::Generative(cclm(7, 2)),
    ];
    for d in &discs {
        let all = d.prefix_posteriors(&seq, &mut CostCounters::default()).unwrap();
        assert_eq!(all.len(), seq.len());
        for t in 0..seq.len() {
            let p = d.posterior(&seq[..=t], &mut CostCounters::default()).unwrap();
            assert_close(&all[t], &p, 1e-9);
        }
    }
}

#[test]
fn growing_sequence_cost_is_cubic_vs_quadratic() {
    let bi = Discriminator::bidirectional(classifier(MaskMode::Bidirectional, 1)).unwrap();
    let uni = Discriminator::unidirectional(classifier(MaskMode::Causal, 1)).unwrap();
    let seq: Vec<TokenId> = std::iter::once(BOS).chain((0..29).map(|i| 3 + i % 5)).collect();
    let big_t = seq.len() as u64;
    for d in [&bi, &uni] {
        let mut k = CostCounters::default();
        let (mut state, _) = d.start(&seq[..1], &mut k).unwrap();
        for t in 1..seq.len() {
            let (next, _) = d.child(&mut state, &seq[..t], seq[t], &mut k).unwrap();
            state = next;
        }
        let expected: u64 = match d.family() {
            Family::Bidirectional => (1..=big_t).map(|t| 4 * t * t).sum(),
            _ => (1..=big_t).map(|t| 4 * t).sum(),
        };
        assert_eq!(k.attention_scores, expected);
    }
}

#[test]
fn state_family_mismatch_is_an_error() {
    let uni = Discriminator::unidirectional(classifier(MaskMode::Causal, 1)).unwrap();
    let mut wrong = DiscState::Stateless;
    assert!(matches!(
        uni.child(&mut wrong, &[BOS], 3, &mut CostCounters::default()),
        Err(Error::State(_))
    ));
    let (mut state, _) = uni.start(&[BOS, 3], &mut CostCounters::default()).unwrap();
    assert!(matches!(
        uni.child(&mut state, &[BOS], 3, &mut CostCounters::default()),
        Err(Error::State(_))
    ));
}

#[test]
fn family_names() {
    for f in Family::ALL {
        assert_eq!(f.short_name().parse::<Family>().unwrap(), f);
    }
    assert!(matches!("lstm".parse::<Family>(), Err(Error::Configuration(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn assembled_child_equals_sequential_update(
        ctx in prop::collection::vec(3u32..VOCAB as u32, 0..10),
        v in 0u32..VOCAB as u32,
        seed in 0u64..4,
    ) {
        let g = Gedi::new(Bigram::random(3, seed));
        let mut context = vec![BOS];
        context.extend(ctx);
        let mut k = CostCounters::default();
        let (mut state, _) = g.start_state(&context, &mut k).unwrap();
        let (_, assembled) = g.extend_state(&mut state, v, &mut k).unwrap();
        let mut seq = context.clone();
        seq.push(v);
        let oracle = bayes_oracle(&g.lm, &seq);
        for (a, b) in assembled.probs().iter().zip(&oracle) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn posteriors_are_normalized(tokens in prop::collection::vec(0u32..VOCAB as u32, 1..30),
                                 seed in 0u64..3) {
        let discs = [
            Discriminator::bidirectional(classifier(MaskMode::Bidirectional, seed)).unwrap(),
            Discriminator::unidirectional(classifier(MaskMode::Causal, seed)).unwrap(),
        ];
        for d in &discs {
            let p = d.posterior(&tokens, &mut CostCounters::default()).unwrap();
            prop_assert!((p.probs().iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(p.probs().iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
        let mut seq = vec![BOS];
        seq.extend(&tokens);
        let p = Gedi::new(Bigram::random(2, seed)).prefix_posteriors(&seq, &mut CostCounters::default()).unwrap();
        for q in p {
            prop_assert!((q.probs().iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }
}
