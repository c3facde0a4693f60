//! PUCT Monte-Carlo Tree Search decoding.
//!
//! The LM provides priors over next tokens; the value of a leaf is the
//! discriminator's probability of the target class (no rollouts). Each
//! decoding step runs a fixed number of iterations and emits the most
//! visited root child.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{TokenId, BOS, EOS, L_MAX, PAD};
use crate::discriminators::ValueSource;
use crate::error::{Error, Result};
use crate::model::{HeadKind, IncrementalState, Transformer};
use crate::numerics::{log_softmax, softmax};
use crate::profiling::CostCounters;

/// Next-token distributions for the search priors.
pub trait PriorSource {
    type State: Clone + Send;

    fn vocab_size(&self) -> usize;

    /// Encodes `context`; returns the state, the next-token logits, and
    /// `Σ log p(context[i] | context[..i])` over `i >= 1`.
    fn start(
        &self,
        context: &[TokenId],
        counters: &mut CostCounters,
    ) -> Result<(Self::State, Vec<f64>, f64)>;

    /// Appends `token` to `state`; returns the next-token logits.
    fn extend(
        &self,
        state: &mut Self::State,
        token: TokenId,
        counters: &mut CostCounters,
    ) -> Result<Vec<f64>>;
}

impl PriorSource for Transformer {
    type State = IncrementalState;

    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn start(
        &self,
        context: &[TokenId],
        counters: &mut CostCounters,
    ) -> Result<(IncrementalState, Vec<f64>, f64)> {
        if self.config.head_kind != HeadKind::Lm {
            return Err(Error::Configuration("search priors need a language model".into()));
        }
        let (state, logits) = self.prefill(context, counters)?;
        let ll = (1..context.len())
            .map(|i| log_softmax(logits.row(i - 1))[context[i] as usize])
            .sum();
        Ok((state, logits.row(context.len() - 1).to_vec(), ll))
    }

    fn extend(
        &self,
        state: &mut IncrementalState,
        token: TokenId,
        counters: &mut CostCounters,
    ) -> Result<Vec<f64>> {
        self.forward_incremental(state, token, counters)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueKind {
    /// `p(target | sequence)` from the discriminator.
    Discriminator,
    /// `exp(mean log p(x_t | x_<t))` under the LM, over tokens after BOS.
    LmLikelihood,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backup {
    /// `Q = W / N`.
    Mean,
    /// `Q` = best value seen below the node.
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchParams {
    pub c_puct: f64,
    pub tau: f64,
    pub iterations_per_token: usize,
    /// Longest sequence in tokens, BOS included.
    pub max_length: usize,
    /// EOS is not offered as a child before the sequence has this many tokens.
    pub min_length: usize,
    pub target_class: usize,
    pub value_source: ValueKind,
    pub backup: Backup,
    pub reuse_subtree: bool,
    /// Discriminator values are multiplied by `lm_value^lm_weight`; zero disables.
    pub lm_weight: f64,
    /// Children materialized per expansion, by prior; `None` keeps all.
    pub top_k: Option<usize>,
}

impl Default for SearchParams {
    fn default() -> Self {
        Self {
            c_puct: 3.0,
            tau: 1.0,
            iterations_per_token: 50,
            max_length: L_MAX,
            min_length: 0,
            target_class: 0,
            value_source: ValueKind::Discriminator,
            backup: Backup::Mean,
            reuse_subtree: true,
            lm_weight: 0.0,
            top_k: None,
        }
    }
}

impl SearchParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Parameter(m.into()));
        if !(self.c_puct >= 0.0 && self.c_puct.is_finite()) {
            return bad("c_puct must be finite and >= 0");
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau must be finite and > 0");
        }
        if self.iterations_per_token == 0 {
            return bad("iterations_per_token must be >= 1");
        }
        if self.max_length == 0 {
            return bad("max_length must be >= 1");
        }
        if !(self.lm_weight >= 0.0 && self.lm_weight.is_finite()) {
            return bad("lm_weight must be finite and >= 0");
        }
        if self.top_k == Some(0) {
            return bad("top_k must be >= 1");
        }
        Ok(())
    }
}

/// `Q + c · P · √N_parent / (1 + N_child)` with `Q = 0` for unvisited children.
pub fn puct_score(parent_visits: u64, child: &NodeStats, c_puct: f64) -> f64 {
    child.q() + c_puct * child.prior * (parent_visits as f64).sqrt() / (1.0 + child.visits as f64)
}

/// Search statistics of one node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeStats {
    pub token: TokenId,
    pub prior: f64,
    pub visits: u64,
    pub total_value: f64,
    /// Used instead of the mean under [`Backup::Max`].
    pub max_value: Option<f64>,
}

impl NodeStats {
    pub fn q(&self) -> f64 {
        match self.max_value {
            Some(m) if self.visits > 0 => m,
            _ => self.total_value / self.visits.max(1) as f64,
        }
    }
}

#[derive(Debug, Clone)]
struct Node<LS, VS> {
    stats: NodeStats,
    parent: Option<usize>,
    children: Vec<usize>,
    expanded: bool,
    terminal: bool,
    /// Leaf value, set on first evaluation.
    value: Option<f64>,
    /// `p(target | sequence)`, set on first evaluation (root: at creation).
    target_prob: Option<f64>,
    /// Times this node was the evaluated leaf of an iteration.
    self_evaluations: u64,
    /// Children evaluated so far.
    explored_children: u64,
    /// LM log-likelihood of the sequence after BOS.
    lm_log_lik: f64,
    lm_state: Option<LS>,
    disc_state: Option<VS>,
}

/// Work done by one decoding step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub lm_cost: CostCounters,
    pub disc_cost: CostCounters,
    /// Leaves evaluated for the first time.
    pub evaluated: u64,
    /// Of those, EOS leaves that reused their parent's posterior.
    pub eos_reused: u64,
    /// Nodes whose children were materialized.
    pub expanded: u64,
    /// Nodes that had a first child evaluated during this step.
    pub parents_explored: u64,
    pub wall_seconds: f64,
}

/// One search tree. Node 0 is the root.
pub struct SearchTree<L: PriorSource, V: ValueSource> {
    nodes: Vec<Node<L::State, V::State>>,
    root_seq: Vec<TokenId>,
}

impl<L: PriorSource, V: ValueSource> SearchTree<L, V> {
    /// Encodes `context` with both models and expands the root.
    pub fn new(
        context: &[TokenId],
        lm: &L,
        source: &V,
        params: &SearchParams,
        stats: &mut StepStats,
    ) -> Result<Self> {
        if context.first() != Some(&BOS) {
            return Err(Error::Validation("search context must start with BOS".into()));
        }
        let (lm_state, logits, lm_log_lik) = lm.start(context, &mut stats.lm_cost)?;
        let (disc_state, target_prob) = match params.value_source {
            ValueKind::Discriminator => {
                let (s, p) = source.start(context, &mut stats.disc_cost)?;
                (Some(s), Some(p.prob(params.target_class)))
            }
            ValueKind::LmLikelihood => (None, None),
        };
        let root = Node {
            stats: NodeStats {
                token: *context.last().unwrap(),
                prior: 1.0,
                visits: 0,
                total_value: 0.0,
                max_value: None,
            },
            parent: None,
            children: Vec::new(),
            expanded: false,
            terminal: false,
            value: None,
            target_prob,
            self_evaluations: 0,
            explored_children: 0,
            lm_log_lik,
            lm_state: Some(lm_state),
            disc_state,
        };
        let mut tree = Self {
            nodes: vec![root],
            root_seq: context.to_vec(),
        };
        tree.add_children(0, &logits, params)?;
        stats.expanded += 1;
        Ok(tree)
    }

    pub fn root_sequence(&self) -> &[TokenId] {
        &self.root_seq
    }

    pub fn root_stats(&self) -> NodeStats {
        self.nodes[0].stats
    }

    /// `(token, stats)` of each root child.
    pub fn root_children(&self) -> Vec<NodeStats> {
        self.nodes[0].children.iter().map(|&c| self.nodes[c].stats).collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn sequence(&self, mut id: usize) -> Vec<TokenId> {
        let mut tail = Vec::new();
        while let Some(p) = self.nodes[id].parent {
            tail.push(self.nodes[id].stats.token);
            id = p;
        }
        let mut seq = self.root_seq.clone();
        seq.extend(tail.into_iter().rev());
        seq
    }

    /// Materializes the children of `id` from the LM logits after its sequence.
    fn add_children(&mut self, id: usize, logits: &[f64], params: &SearchParams) -> Result<()> {
        let len = self.sequence(id).len();
        let allowed: Vec<TokenId> = (0..logits.len() as TokenId)
            .filter(|&t| t != BOS && t != PAD && (t != EOS || len >= params.min_length))
            .collect();
        let scaled: Vec<f64> = allowed.iter().map(|&t| logits[t as usize]).collect();
        let priors = softmax(&scaled, params.tau)?;
        let log_probs = log_softmax(logits);
        let mut order: Vec<usize> = (0..allowed.len()).collect();
        if let Some(k) = params.top_k {
            // stable sort keeps lower token ids first among equal priors
            order.sort_by(|&a, &b| priors[b].total_cmp(&priors[a]));
            order.truncate(k);
            order.sort_unstable();
        }
        let base = self.nodes[id].lm_log_lik;
        for i in order {
            let token = allowed[i];
            let child = Node {
                stats: NodeStats {
                    token,
                    prior: priors[i],
                    visits: 0,
                    total_value: 0.0,
                    max_value: None,
                },
                parent: Some(id),
                children: Vec::new(),
                expanded: false,
                terminal: token == EOS || len + 1 >= params.max_length,
                value: None,
                target_prob: None,
                self_evaluations: 0,
                explored_children: 0,
                lm_log_lik: base + log_probs[token as usize],
                lm_state: None,
                disc_state: None,
            };
            self.nodes.push(child);
            let cid = self.nodes.len() - 1;
            self.nodes[id].children.push(cid);
        }
        self.nodes[id].expanded = true;
        Ok(())
    }

    /// PUCT child of `id`; exact score ties are broken with the tree's RNG.
    fn select_child(&self, id: usize, params: &SearchParams, rng: &mut ChaCha8Rng) -> usize {
        // floor at 1 so the first choice at a fresh root follows the priors
        let parent_visits = self.nodes[id].stats.visits.max(1);
        let mut best = Vec::new();
        let mut best_score = f64::NEG_INFINITY;
        for &c in &self.nodes[id].children {
            let s = puct_score(parent_visits, &self.nodes[c].stats, params.c_puct);
            if s > best_score {
                best_score = s;
                best.clear();
                best.push(c);
            } else if s == best_score {
                best.push(c);
            }
        }
        if best.len() == 1 {
            best[0]
        } else {
            best[rng.gen_range(0..best.len())]
        }
    }

    fn evaluate(
        &mut self,
        id: usize,
        source: &V,
        params: &SearchParams,
        stats: &mut StepStats,
    ) -> Result<f64> {
        let seq = self.sequence(id);
        let n_scored = (seq.len() - 1).max(1) as f64;
        let lm_value = (self.nodes[id].lm_log_lik / n_scored).exp();
        let value = match params.value_source {
            ValueKind::LmLikelihood => lm_value,
            ValueKind::Discriminator => {
                let parent = self.nodes[id].parent.expect("root is never evaluated");
                let token = self.nodes[id].stats.token;
                let target = if token == EOS && !source.scores_eos() {
                    stats.eos_reused += 1;
                    self.nodes[parent].target_prob.expect("parent evaluated")
                } else {
                    let mut parent_state = self.nodes[parent]
                        .disc_state
                        .take()
                        .ok_or_else(|| Error::State("parent has no discriminator state".into()))?;
                    let result =
                        source.child(&mut parent_state, &seq[..seq.len() - 1], token, &mut stats.disc_cost);
                    self.nodes[parent].disc_state = Some(parent_state);
                    let (state, posterior) = result?;
                    if !self.nodes[id].terminal {
                        self.nodes[id].disc_state = Some(state);
                    }
                    posterior.prob(params.target_class)
                };
                self.nodes[id].target_prob = Some(target);
                if params.lm_weight > 0.0 {
                    target * lm_value.powf(params.lm_weight)
                } else {
                    target
                }
            }
        };
        stats.evaluated += 1;
        if let Some(parent) = self.nodes[id].parent {
            if self.nodes[parent].explored_children == 0 {
                stats.parents_explored += 1;
            }
            self.nodes[parent].explored_children += 1;
        }
        self.nodes[id].value = Some(value);
        Ok(value)
    }

    fn expand(&mut self, id: usize, lm: &L, params: &SearchParams, stats: &mut StepStats) -> Result<()> {
        let parent = self.nodes[id].parent.expect("root is expanded at creation");
        let mut state = self.nodes[parent]
            .lm_state
            .as_ref()
            .ok_or_else(|| Error::State("parent has no LM state".into()))?
            .clone();
        let logits = lm.extend(&mut state, self.nodes[id].stats.token, &mut stats.lm_cost)?;
        self.nodes[id].lm_state = Some(state);
        self.add_children(id, &logits, params)?;
        stats.expanded += 1;
        Ok(())
    }

    /// Selection, evaluation of one leaf, expansion, backpropagation.
    /// Returns the selected path (node tokens after the root).
    pub fn run_iteration(
        &mut self,
        lm: &L,
        source: &V,
        params: &SearchParams,
        rng: &mut ChaCha8Rng,
        stats: &mut StepStats,
    ) -> Result<Vec<TokenId>> {
        let mut path = vec![0];
        let mut id = 0;
        while self.nodes[id].expanded && !self.nodes[id].terminal && !self.nodes[id].children.is_empty() {
            id = self.select_child(id, params, rng);
            path.push(id);
        }
        let value = match self.nodes[id].value {
            Some(v) => v,
            None => {
                let v = self.evaluate(id, source, params, stats)?;
                if !self.nodes[id].terminal {
                    self.expand(id, lm, params, stats)?;
                }
                v
            }
        };
        self.nodes[id].self_evaluations += 1;
        for &n in &path {
            let s = &mut self.nodes[n].stats;
            s.visits += 1;
            s.total_value += value;
            if params.backup == Backup::Max {
                s.max_value = Some(s.max_value.map_or(value, |m: f64| m.max(value)));
            }
        }
        Ok(path[1..].iter().map(|&n| self.nodes[n].stats.token).collect())
    }

    /// Most visited root child; ties go to higher Q, then lower token id.
    pub fn best_child(&self) -> Option<usize> {
        self.nodes[0].children.iter().copied().reduce(|a, b| {
            let (sa, sb) = (&self.nodes[a].stats, &self.nodes[b].stats);
            let better = sb.visits > sa.visits
                || (sb.visits == sa.visits
                    && (sb.q() > sa.q() || (sb.q() == sa.q() && sb.token < sa.token)));
            if better {
                b
            } else {
                a
            }
        })
    }

    /// Keeps only the subtree under root child `child`, which becomes the root.
    fn reroot(mut self, child: usize) -> Self {
        let root_seq = self.sequence(child);
        let mut map = vec![usize::MAX; self.nodes.len()];
        let mut order = vec![child];
        let mut i = 0;
        while i < order.len() {
            let n = order[i];
            map[n] = i;
            order.extend(self.nodes[n].children.iter().copied());
            i += 1;
        }
        let mut old: Vec<Option<Node<L::State, V::State>>> = self.nodes.drain(..).map(Some).collect();
        let nodes = order
            .iter()
            .map(|&o| {
                let mut n = old[o].take().unwrap();
                n.parent = if o == child { None } else { n.parent.map(|p| map[p]) };
                n.children.iter_mut().for_each(|c| *c = map[*c]);
                n
            })
            .collect();
        Self { nodes, root_seq }
    }

    /// Checks the visit-conservation law on every node.
    pub fn visits_are_conserved(&self) -> bool {
        self.nodes.iter().all(|n| {
            let below: u64 = n.children.iter().map(|&c| self.nodes[c].stats.visits).sum();
            n.stats.visits == below + n.self_evaluations
        })
    }

    /// Every node's Q lies in `[0, 1]`.
    pub fn values_in_unit_interval(&self) -> bool {
        self.nodes.iter().all(|n| (0.0..=1.0).contains(&n.stats.q()))
    }
}

/// Outcome of a decoding step.
pub enum StepOutcome<L: PriorSource, V: ValueSource> {
    /// The sequence continues; the tree for the next step (if reused).
    Continue(TokenId, Option<SearchTree<L, V>>),
    /// EOS was chosen or the length bound was reached.
    Finished(TokenId),
}

/// Runs `iterations_per_token` iterations and picks the next token.
pub fn decode_step<L: PriorSource, V: ValueSource>(
    mut tree: SearchTree<L, V>,
    lm: &L,
    source: &V,
    params: &SearchParams,
    rng: &mut ChaCha8Rng,
    stats: &mut StepStats,
) -> Result<StepOutcome<L, V>> {
    for _ in 0..params.iterations_per_token {
        tree.run_iteration(lm, source, params, rng, stats)?;
    }
    let best = tree
        .best_child()
        .ok_or_else(|| Error::State("root has no children".into()))?;
    let token = tree.nodes[best].stats.token;
    if tree.nodes[best].terminal {
        return Ok(StepOutcome::Finished(token));
    }
    let next = params.reuse_subtree.then(|| tree.reroot(best));
    Ok(StepOutcome::Continue(token, next))
}

/// A generated sequence with per-step work.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Prompt (BOS first) followed by the generated tokens, EOS included if emitted.
    pub tokens: Vec<TokenId>,
    pub steps: Vec<StepStats>,
}

pub fn generate<L: PriorSource, V: ValueSource>(
    prompt: &[TokenId],
    lm: &L,
    source: &V,
    params: &SearchParams,
    rng_seed: u64,
) -> Result<Generation> {
    params.validate()?;
    if lm.vocab_size() != source.vocab_size() {
        return Err(Error::Configuration(format!(
            "LM vocabulary ({}) differs from discriminator vocabulary ({})",
            lm.vocab_size(),
            source.vocab_size()
        )));
    }
    if params.target_class >= source.num_classes() {
        return Err(Error::Parameter(format!(
            "target class {} but the discriminator has {} classes",
            params.target_class,
            source.num_classes()
        )));
    }
    if prompt.first() != Some(&BOS) {
        return Err(Error::Validation("prompt must start with BOS".into()));
    }
    let mut tokens = prompt.to_vec();
    let mut steps = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut tree: Option<SearchTree<L, V>> = None;
    while tokens.len() < params.max_length && tokens.last() != Some(&EOS) {
        let start = Instant::now();
        let mut stats = StepStats::default();
        let t = match tree.take() {
            Some(t) => t,
            None => SearchTree::new(&tokens, lm, source, params, &mut stats)?,
        };
        let outcome = decode_step(t, lm, source, params, &mut rng, &mut stats)?;
        stats.wall_seconds = start.elapsed().as_secs_f64();
        steps.push(stats);
        match outcome {
            StepOutcome::Finished(tok) => {
                tokens.push(tok);
                break;
            }
            StepOutcome::Continue(tok, next) => {
                tokens.push(tok);
                tree = next;
            }
        }
    }
    Ok(Generation { tokens, steps })
}

/// One request of a batch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationJob {
    pub prompt: Vec<TokenId>,
    pub target_class: usize,
    pub seed: u64,
}

/// Independent searches run in parallel; item `i` equals `generate` on job
/// `i` alone.
pub fn generate_batch<L, V>(
    jobs: &[GenerationJob],
    lm: &L,
    source: &V,
    params: &SearchParams,
) -> Result<Vec<Generation>>
where
    L: PriorSource + Sync,
    V: ValueSource + Sync,
{
    jobs.par_iter()
        .map(|job| {
            let p = SearchParams {
                target_class: job.target_class,
                ..params.clone()
            };
            generate(&job.prompt, lm, source, &p, job.seed)
        })
        .collect()
}

#[cfg(test)]
mod tests;
