use std::collections::HashMap;

use proptest::prelude::*;

use super::*;
use crate::discriminators::{ClassPosterior, Discriminator, NullGuide};
use crate::model::{Backbone, MaskMode, ModelConfig};

const A: TokenId = 3;
const B: TokenId = 4;

/// LM whose next-token probabilities depend on the last token only.
struct TableLm {
    vocab: usize,
    next: HashMap<TokenId, Vec<f64>>,
}

impl TableLm {
    fn logits(&self, last: TokenId) -> Vec<f64> {
        self.next
            .get(&last)
            .map(|p| p.iter().map(|x| x.ln()).collect())
            .unwrap_or_else(|| vec![0.0; self.vocab])
    }
}

impl PriorSource for TableLm {
    type State = TokenId;

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn start(&self, context: &[TokenId], counters: &mut CostCounters) -> Result<(TokenId, Vec<f64>, f64)> {
        counters.forward_passes += 1;
        let last = *context.last().unwrap();
        Ok((last, self.logits(last), 0.0))
    }

    fn extend(&self, state: &mut TokenId, token: TokenId, counters: &mut CostCounters) -> Result<Vec<f64>> {
        counters.forward_passes += 1;
        *state = token;
        Ok(self.logits(token))
    }
}

/// Two-class discriminator returning `p(class 0)` from a lookup on the text.
struct TableDisc {
    vocab: usize,
    values: HashMap<Vec<TokenId>, f64>,
    default: f64,
}

impl TableDisc {
    fn posterior(&self, seq: &[TokenId]) -> ClassPosterior {
        let p = *self.values.get(&seq[1..]).unwrap_or(&self.default);
        ClassPosterior::new(vec![p, 1.0 - p]).unwrap()
    }
}

impl ValueSource for TableDisc {
    type State = ();

    fn num_classes(&self) -> usize {
        2
    }

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn start(&self, context: &[TokenId], counters: &mut CostCounters) -> Result<((), ClassPosterior)> {
        counters.forward_passes += 1;
        Ok(((), self.posterior(context)))
    }

    fn child(
        &self,
        _: &mut (),
        parent_seq: &[TokenId],
        token: TokenId,
        counters: &mut CostCounters,
    ) -> Result<((), ClassPosterior)> {
        counters.forward_passes += 1;
        let mut seq = parent_seq.to_vec();
        seq.push(token);
        Ok(((), self.posterior(&seq)))
    }

    fn scores_eos(&self) -> bool {
        true
    }
}

/// Two-letter alphabet, sequences of exactly two letters after BOS.
fn toy() -> (TableLm, TableDisc, SearchParams) {
    let probs = |a: f64, b: f64| vec![1.0, 1.0, 1.0, a, b];
    let lm = TableLm {
        vocab: 5,
        next: HashMap::from([(BOS, probs(0.6, 0.4)), (A, probs(0.3, 0.7)), (B, probs(0.8, 0.2))]),
    };
    let disc = TableDisc {
        vocab: 5,
        values: HashMap::from([
            (vec![A], 0.5),
            (vec![B], 0.6),
            (vec![A, A], 0.2),
            (vec![A, B], 0.9),
            (vec![B, A], 0.4),
            (vec![B, B], 0.1),
        ]),
        default: 0.5,
    };
    let params = SearchParams {
        c_puct: 2.0,
        tau: 1.0,
        iterations_per_token: 6,
        max_length: 3,
        min_length: 3,
        ..SearchParams::default()
    };
    (lm, disc, params)
}

fn stats_of(children: &[NodeStats], token: TokenId) -> NodeStats {
    *children.iter().find(|s| s.token == token).unwrap()
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

#[test]
fn puct_reference_values() {
    let c1 = NodeStats {
        token: A,
        prior: 0.2,
        visits: 3,
        total_value: 2.4,
        max_value: None,
    };
    let c2 = NodeStats {
        token: B,
        prior: 0.5,
        visits: 1,
        total_value: 0.9,
        max_value: None,
    };
    let (s1, s2) = (puct_score(10, &c1, 3.0), puct_score(10, &c2, 3.0));
    assert!((s1 - 1.274_341_649_025_256_9).abs() < 1e-12);
    assert!((s2 - 3.271_708_245_126_284_5).abs() < 1e-12);
    assert!(s2 > s1);
    // c = 0: pure exploitation, highest Q (0.9 vs 0.8)
    assert!(puct_score(10, &c2, 0.0) > puct_score(10, &c1, 0.0));
    assert!((puct_score(10, &c1, 0.0) - 0.8).abs() < 1e-15);
    // unvisited, parent N = 1: c · P
    let fresh = NodeStats { visits: 0, total_value: 0.0, ..c2 };
    assert_eq!(puct_score(1, &fresh, 3.0), 1.5);
}

#[test]
fn toy_trace_matches_hand_simulation() {
    let (lm, disc, params) = toy();
    let mut stats = StepStats::default();
    let mut tree = SearchTree::new(&[BOS], &lm, &disc, &params, &mut stats).unwrap();
    let mut r = rng();
    let paths: Vec<Vec<TokenId>> = (0..6)
        .map(|_| tree.run_iteration(&lm, &disc, &params, &mut r, &mut stats).unwrap())
        .collect();
    assert_eq!(
        paths,
        vec![vec![A], vec![A, B], vec![A, B], vec![B], vec![B, A], vec![A, B]]
    );
    assert_eq!(tree.root_stats().visits, 6);
    assert!((tree.root_stats().total_value - 4.2).abs() < 1e-12);
    let kids = tree.root_children();
    assert_eq!(stats_of(&kids, A).visits, 4);
    assert!((stats_of(&kids, A).total_value - 3.2).abs() < 1e-12);
    assert_eq!(stats_of(&kids, B).visits, 2);
    assert!(tree.visits_are_conserved());
    // terminal revisits reuse the cached value: 4 distinct leaves evaluated
    assert_eq!(stats.evaluated, 4);

    let (lm, disc, params) = toy();
    let tree = SearchTree::new(&[BOS], &lm, &disc, &params, &mut StepStats::default()).unwrap();
    match decode_step(tree, &lm, &disc, &params, &mut rng(), &mut StepStats::default()).unwrap() {
        StepOutcome::Continue(tok, Some(next)) => {
            assert_eq!(tok, A);
            assert_eq!(next.root_sequence(), &[BOS, A]);
            assert_eq!(next.root_stats().visits, 4);
            assert!(next.visits_are_conserved());
        }
        _ => panic!("expected a reusable subtree"),
    }
}

#[test]
fn one_iteration_on_fresh_root() {
    let (lm, disc, params) = toy();
    let mut stats = StepStats::default();
    let mut tree = SearchTree::new(&[BOS], &lm, &disc, &params, &mut stats).unwrap();
    let path = tree.run_iteration(&lm, &disc, &params, &mut rng(), &mut stats).unwrap();
    assert_eq!(path, vec![A]); // highest prior
    assert_eq!(tree.root_stats().visits, 1);
    assert_eq!(stats.evaluated, 1);
    assert_eq!(tree.root_children().iter().map(|s| s.visits).sum::<u64>(), 1);
}

#[test]
fn backing_up_one_never_lowers_q() {
    let (lm, mut disc, params) = toy();
    let mut tree = SearchTree::new(&[BOS], &lm, &disc, &params, &mut StepStats::default()).unwrap();
    let mut r = rng();
    tree.run_iteration(&lm, &disc, &params, &mut r, &mut StepStats::default()).unwrap();
    let before: Vec<f64> = tree.nodes.iter().map(|n| n.stats.q()).collect();
    disc.values.values_mut().for_each(|v| *v = 1.0);
    // the second iteration reaches a fresh leaf, which now scores 1.0
    let path = tree.run_iteration(&lm, &disc, &params, &mut r, &mut StepStats::default()).unwrap();
    assert_eq!(path, vec![A, B]);
    for (i, q) in before.iter().enumerate() {
        assert!(tree.nodes[i].stats.q() >= *q);
    }
}

#[test]
fn discriminator_favoring_a_picks_a() {
    let lm = TableLm {
        vocab: 5,
        next: HashMap::from([(BOS, vec![1.0, 1.0, 1.0, 0.2, 0.8])]),
    };
    let mut values = HashMap::new();
    for seq in [vec![A], vec![A, A], vec![A, B]] {
        values.insert(seq, 0.95);
    }
    let disc = TableDisc {
        vocab: 5,
        values,
        default: 0.05,
    };
    let params = SearchParams {
        iterations_per_token: 30,
        max_length: 3,
        min_length: 3,
        ..SearchParams::default()
    };
    let g = generate(&[BOS], &lm, &disc, &params, 1).unwrap();
    assert_eq!(g.tokens[1], A);
}

#[test]
fn lm_likelihood_with_uniform_lm_breaks_ties_by_token_id() {
    let lm = TableLm {
        vocab: 7,
        next: HashMap::new(),
    };
    let guide = NullGuide {
        num_classes: 2,
        vocab_size: 7,
    };
    let params = SearchParams {
        value_source: ValueKind::LmLikelihood,
        iterations_per_token: 9,
        max_length: 4,
        ..SearchParams::default()
    };
    for seed in 0..5 {
        let mut tree = SearchTree::new(&[BOS], &lm, &guide, &params, &mut StepStats::default()).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..params.iterations_per_token {
            tree.run_iteration(&lm, &guide, &params, &mut r, &mut StepStats::default()).unwrap();
        }
        let kids = tree.root_children();
        let top = kids.iter().map(|s| s.visits).max().unwrap();
        let expected = kids.iter().filter(|s| s.visits == top).map(|s| s.token).min().unwrap();
        let chosen = tree.nodes[tree.best_child().unwrap()].stats.token;
        assert_eq!(chosen, expected);
    }
}

#[test]
fn degenerate_length_bound_returns_prompt() {
    let (lm, disc, mut params) = toy();
    params.max_length = 1;
    let g = generate(&[BOS], &lm, &disc, &params, 0).unwrap();
    assert_eq!(g.tokens, vec![BOS]);
    assert!(g.steps.is_empty());
}

#[test]
fn vocabulary_mismatch_is_a_configuration_error() {
    let (lm, mut disc, params) = toy();
    disc.vocab = 6;
    assert!(matches!(generate(&[BOS], &lm, &disc, &params, 0), Err(Error::Configuration(_))));
}

#[test]
fn invalid_params_are_rejected() {
    let (lm, disc, params) = toy();
    for p in [
        SearchParams { iterations_per_token: 0, ..params.clone() },
        SearchParams { tau: 0.0, ..params.clone() },
        SearchParams { c_puct: -1.0, ..params.clone() },
        SearchParams { target_class: 2, ..params.clone() },
    ] {
        assert!(matches!(generate(&[BOS], &lm, &disc, &p, 0), Err(Error::Parameter(_))));
    }
    assert!(matches!(generate(&[A], &lm, &disc, &params, 0), Err(Error::Validation(_))));
}

#[test]
fn subtree_reuse_matches_rebuilt_tree_with_seeded_statistics() {
    let (lm, disc, mut params) = toy();
    params.max_length = 4;
    params.min_length = 4;
    let mut r = rng();
    let tree = SearchTree::new(&[BOS], &lm, &disc, &params, &mut StepStats::default()).unwrap();
    let reused = match decode_step(tree, &lm, &disc, &params, &mut r, &mut StepStats::default()).unwrap() {
        StepOutcome::Continue(_, Some(t)) => t,
        _ => panic!("expected a subtree"),
    };

    // rebuild from scratch on the same prefix and copy the statistics in
    let prefix = reused.root_sequence().to_vec();
    let mut rebuilt = SearchTree::new(&prefix, &lm, &disc, &params, &mut StepStats::default()).unwrap();
    fn copy(
        src: &SearchTree<TableLm, TableDisc>,
        s: usize,
        dst: &mut SearchTree<TableLm, TableDisc>,
        d: usize,
        lm: &TableLm,
        disc: &TableDisc,
        params: &SearchParams,
    ) {
        dst.nodes[d].stats = src.nodes[s].stats;
        dst.nodes[d].value = src.nodes[s].value;
        dst.nodes[d].target_prob = src.nodes[s].target_prob;
        dst.nodes[d].self_evaluations = src.nodes[s].self_evaluations;
        if src.nodes[s].expanded && !dst.nodes[d].expanded {
            let _ = disc;
            dst.nodes[d].disc_state = Some(());
            dst.expand(d, lm, params, &mut StepStats::default()).unwrap();
        }
        let pairs: Vec<(usize, usize)> = src.nodes[s]
            .children
            .iter()
            .map(|&sc| {
                let tok = src.nodes[sc].stats.token;
                let dc = *dst.nodes[d].children.iter().find(|&&c| dst.nodes[c].stats.token == tok).unwrap();
                (sc, dc)
            })
            .collect();
        for (sc, dc) in pairs {
            copy(src, sc, dst, dc, lm, disc, params);
        }
    }
    copy(&reused, 0, &mut rebuilt, 0, &lm, &disc, &params);

    let mut r1 = ChaCha8Rng::seed_from_u64(9);
    let mut r2 = ChaCha8Rng::seed_from_u64(9);
    let pick = |o: StepOutcome<TableLm, TableDisc>| match o {
        StepOutcome::Continue(t, _) | StepOutcome::Finished(t) => t,
    };
    let a = pick(decode_step(reused, &lm, &disc, &params, &mut r1, &mut StepStats::default()).unwrap());
    let b = pick(decode_step(rebuilt, &lm, &disc, &params, &mut r2, &mut StepStats::default()).unwrap());
    assert_eq!(a, b);
}

fn tiny_models() -> (Transformer, Discriminator, Discriminator, Discriminator) {
    let b = Backbone {
        num_layers: 1,
        hidden_size: 8,
        num_heads: 2,
        max_positions: 64,
    };
    let v = 9;
    let mut lm = Transformer::new(ModelConfig::lm(b, v).unwrap(), 1).unwrap();
    lm.params.head_w.data_mut().iter_mut().for_each(|x| *x *= 30.0);
    let mut bi = Transformer::new(ModelConfig::classifier(b, v, 2, MaskMode::Bidirectional).unwrap(), 2).unwrap();
    bi.params.head_w.data_mut().iter_mut().for_each(|x| *x *= 30.0);
    let mut uni = Transformer::new(ModelConfig::classifier(b, v, 2, MaskMode::Causal).unwrap(), 3).unwrap();
    uni.params.head_w.data_mut().iter_mut().for_each(|x| *x *= 30.0);
    let mut cc = Transformer::new(ModelConfig::lm(b, v + 2).unwrap(), 4).unwrap();
    cc.params.head_w.data_mut().iter_mut().for_each(|x| *x *= 30.0);
    (
        lm,
        Discriminator::bidirectional(bi).unwrap(),
        Discriminator::unidirectional(uni).unwrap(),
        Discriminator::generative(cc, 2).unwrap(),
    )
}

#[test]
fn generation_is_deterministic_and_batch_matches_sequential() {
    let (lm, bi, uni, gedi) = tiny_models();
    let params = SearchParams {
        iterations_per_token: 8,
        max_length: 10,
        ..SearchParams::default()
    };
    for disc in [&bi, &uni, &gedi] {
        let jobs: Vec<GenerationJob> = (0..30)
            .map(|i| GenerationJob {
                prompt: vec![BOS, 3 + (i % 4) as TokenId],
                target_class: (i % 2) as usize,
                seed: 100 + i,
            })
            .collect();
        let batch = generate_batch(&jobs, &lm, disc, &params).unwrap();
        for (job, out) in jobs.iter().zip(&batch) {
            let p = SearchParams {
                target_class: job.target_class,
                ..params.clone()
            };
            let single = generate(&job.prompt, &lm, disc, &p, job.seed).unwrap();
            assert_eq!(single.tokens, out.tokens);
            let cost = |g: &Generation| g.steps.iter().map(|s| s.disc_cost).collect::<Vec<_>>();
            assert_eq!(cost(&single), cost(out));
        }
        let same = vec![jobs[0].clone(); 8];
        let outs = generate_batch(&same, &lm, disc, &params).unwrap();
        assert!(outs.iter().all(|o| o.tokens == outs[0].tokens));
        assert!(generate_batch(&[], &lm, disc, &params).unwrap().is_empty());
    }
}

#[test]
fn per_step_forward_accounting_by_family() {
    let (lm, bi, uni, gedi) = tiny_models();
    let params = SearchParams {
        iterations_per_token: 12,
        max_length: 8,
        min_length: 8,
        ..SearchParams::default()
    };
    for disc in [&bi, &uni] {
        let g = generate(&[BOS], &lm, disc, &params, 5).unwrap();
        for (i, s) in g.steps.iter().enumerate() {
            // one forward per newly evaluated node, plus the root encoding on step 0
            let start = u64::from(i == 0);
            assert_eq!(s.disc_cost.forward_passes, s.evaluated - s.eos_reused + start);
        }
    }
    let g = generate(&[BOS], &lm, &gedi, &params, 5).unwrap();
    for s in &g.steps {
        assert_eq!(s.disc_cost.forward_passes % 2, 0);
        assert!(s.disc_cost.forward_passes <= 2 * (s.expanded + 1));
    }
    // wide trees: many siblings share one |C|-forward scoring of their parent
    let wide = SearchParams { c_puct: 50.0, ..params };
    let g = generate(&[BOS], &lm, &gedi, &wide, 5).unwrap();
    let total_evaluated: u64 = g.steps.iter().map(|s| s.evaluated).sum();
    let total_forwards: u64 = g.steps.iter().map(|s| s.disc_cost.forward_passes).sum();
    assert!(total_forwards < total_evaluated, "{total_forwards} vs {total_evaluated}");
}

#[test]
fn lm_mixing_and_max_backup_keep_values_in_unit_interval() {
    let (lm, bi, _, _) = tiny_models();
    for params in [
        SearchParams { lm_weight: 1.0, iterations_per_token: 10, max_length: 6, ..SearchParams::default() },
        SearchParams { backup: Backup::Max, iterations_per_token: 10, max_length: 6, ..SearchParams::default() },
        SearchParams { top_k: Some(2), iterations_per_token: 10, max_length: 6, ..SearchParams::default() },
    ] {
        let mut tree = SearchTree::new(&[BOS], &lm, &bi, &params, &mut StepStats::default()).unwrap();
        let mut r = rng();
        for _ in 0..20 {
            tree.run_iteration(&lm, &bi, &params, &mut r, &mut StepStats::default()).unwrap();
        }
        assert!(tree.values_in_unit_interval());
        assert!(tree.visits_are_conserved());
        if let Some(k) = params.top_k {
            assert!(tree.nodes.iter().all(|n| n.children.len() <= k));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conservation_and_unit_values(
        values in prop::collection::vec(0.0f64..=1.0, 64),
        iterations in 1usize..60,
        c_puct in 0.0f64..6.0,
        seed in 0u64..1000,
    ) {
        let lm = TableLm { vocab: 6, next: HashMap::new() };
        let mut table = HashMap::new();
        let mut i = 0;
        for a in 1..6u32 {
            for b in 1..6u32 {
                table.insert(vec![a, b], values[i % 64]);
                table.insert(vec![a], values[(i + 7) % 64]);
                i += 1;
            }
        }
        let disc = TableDisc { vocab: 6, values: table, default: values[63] };
        let params = SearchParams { c_puct, max_length: 4, iterations_per_token: iterations, ..SearchParams::default() };
        let mut tree = SearchTree::new(&[BOS], &lm, &disc, &params, &mut StepStats::default()).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..iterations {
            tree.run_iteration(&lm, &disc, &params, &mut r, &mut StepStats::default()).unwrap();
        }
        prop_assert_eq!(tree.root_stats().visits, iterations as u64);
        prop_assert!(tree.visits_are_conserved());
        prop_assert!(tree.values_in_unit_interval());
    }

    #[test]
    fn selection_depends_on_logits_only_through_tempered_softmax(
        shift in -5.0f64..5.0,
        scale in 0.5f64..3.0,
        seed in 0u64..50,
    ) {
        // logits·s with temperature τ·s give the same priors, hence the same search
        let base = TableLm {
            vocab: 6,
            next: HashMap::from([(BOS, vec![1.0, 0.5, 1.0, 0.1, 0.3, 0.6])]),
        };
        let scaled_logits: Vec<f64> = base.logits(BOS).iter().map(|l| l * scale + shift).collect();
        let scaled = TableLm {
            vocab: 6,
            next: HashMap::from([(BOS, scaled_logits.iter().map(|l| l.exp()).collect())]),
        };
        let disc = TableDisc { vocab: 6, values: HashMap::new(), default: 0.5 };
        let p1 = SearchParams { max_length: 3, tau: 1.0, ..SearchParams::default() };
        let p2 = SearchParams { tau: scale, ..p1.clone() };
        let _ = seed;
        let priors = |lm: &TableLm, p: &SearchParams| {
            let t = SearchTree::new(&[BOS], lm, &disc, p, &mut StepStats::default()).unwrap();
            t.root_children()
        };
        let (a, b) = (priors(&base, &p1), priors(&scaled, &p2));
        prop_assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!(x.token, y.token);
            prop_assert!((x.prior - y.prior).abs() < 1e-12);
        }
    }
}
