//! Class posteriors p(c | x) from three discriminator families.
//!
//! * bidirectional: a full re-encoding of the sequence per query;
//! * unidirectional: a causal classifier extended one token at a time from
//!   cached keys and values;
//! * generative: a class-conditional LM turned into a classifier with Bayes'
//!   rule, which scores every next-token candidate from `|C|` forwards.

use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::{TokenId, BOS};
use crate::error::{Error, Result};
use crate::model::{fork_state, HeadKind, IncrementalState, MaskMode, Transformer};
use crate::numerics::log_softmax;
use crate::profiling::CostCounters;

/// A probability vector over classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPosterior {
    probs: Vec<f64>,
}

impl ClassPosterior {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let sum: f64 = probs.iter().sum();
        if probs.is_empty()
            || probs.iter().any(|p| !(0.0..=1.0).contains(p))
            || (sum - 1.0).abs() > 1e-9
        {
            return Err(Error::Validation(format!("not a probability vector: {probs:?}")));
        }
        Ok(Self { probs })
    }

    pub fn uniform(num_classes: usize) -> Self {
        Self {
            probs: vec![1.0 / num_classes as f64; num_classes],
        }
    }

    /// Softmax of unnormalized log scores (logits or log-likelihoods).
    pub fn from_log_scores(scores: &[f64]) -> Self {
        Self {
            probs: log_softmax(scores).into_iter().map(f64::exp).collect(),
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, class: usize) -> f64 {
        self.probs[class]
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    /// Most probable class; ties go to the lower index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

/// Posteriors of `context · v` for each requested candidate `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChildScores {
    pub scores: Vec<(TokenId, ClassPosterior)>,
    pub cost: CostCounters,
}

/// Something that scores a sequence and its one-token extensions.
///
/// `start` encodes a context; `child` scores the context extended by one
/// token and returns the state for that extension. The parent state is
/// mutable so implementations may cache work shared by all siblings.
pub trait ValueSource {
    type State: Clone + Send;

    fn num_classes(&self) -> usize;

    /// Size of the shared token vocabulary (control tokens excluded).
    fn vocab_size(&self) -> usize;

    fn start(
        &self,
        context: &[TokenId],
        counters: &mut CostCounters,
    ) -> Result<(Self::State, ClassPosterior)>;

    fn child(
        &self,
        parent: &mut Self::State,
        parent_seq: &[TokenId],
        token: TokenId,
        counters: &mut CostCounters,
    ) -> Result<(Self::State, ClassPosterior)>;

    /// Whether sequences ending in EOS are meaningful inputs. Classifiers
    /// trained on raw text are not, and callers reuse the posterior of the
    /// text before EOS instead.
    fn scores_eos(&self) -> bool;
}

/// Scores every candidate continuation of an already encoded context.
pub fn score_children<V: ValueSource>(
    source: &V,
    state: &mut V::State,
    context: &[TokenId],
    candidates: &[TokenId],
) -> Result<ChildScores> {
    if let Some(&bad) = candidates.iter().find(|&&t| t as usize >= source.vocab_size()) {
        return Err(Error::Validation(format!(
            "candidate {bad} outside vocabulary of {}",
            source.vocab_size()
        )));
    }
    let mut cost = CostCounters::default();
    let mut scores = Vec::with_capacity(candidates.len());
    for &t in candidates {
        let (_, posterior) = source.child(state, context, t, &mut cost)?;
        scores.push((t, posterior));
    }
    Ok(ChildScores { scores, cost })
}

fn require(model: &Transformer, mask: MaskMode, what: &str) -> Result<()> {
    if model.config.head_kind != HeadKind::Classifier || model.config.mask_mode != mask {
        return Err(Error::Configuration(format!(
            "{what} discriminator needs a {mask:?} classifier, got {:?} head with {:?} mask",
            model.config.head_kind, model.config.mask_mode
        )));
    }
    Ok(())
}

pub fn score_sequence_bidirectional(
    classifier: &Transformer,
    tokens: &[TokenId],
    counters: &mut CostCounters,
) -> Result<ClassPosterior> {
    require(classifier, MaskMode::Bidirectional, "bidirectional")?;
    let logits = classifier.forward_full(tokens, counters)?;
    Ok(ClassPosterior::from_log_scores(logits.row(0)))
}

/// Extends `state` by `new_token` and classifies the resulting prefix.
pub fn score_sequence_unidirectional(
    classifier: &Transformer,
    state: &mut IncrementalState,
    new_token: TokenId,
    counters: &mut CostCounters,
) -> Result<ClassPosterior> {
    require(classifier, MaskMode::Causal, "unidirectional")?;
    let logits = classifier.forward_incremental(state, new_token, counters)?;
    Ok(ClassPosterior::from_log_scores(&logits))
}

/// A language model conditioned on a class. Implemented by the transformer
/// CC-LM and by small lookup tables in tests.
pub trait ClassConditionalLm {
    type Cache: Clone + Send + Sync;

    fn num_classes(&self) -> usize;

    /// Shared token vocabulary size (conditioning tokens excluded).
    fn vocab_size(&self) -> usize;

    /// Encodes `context` (BOS first) conditioned on `class`; returns the
    /// cache, the next-token log-probabilities indexed by token id, and
    /// `log p(context[1..] | BOS, class)`.
    fn start(
        &self,
        class: usize,
        context: &[TokenId],
        counters: &mut CostCounters,
    ) -> Result<(Self::Cache, Vec<f64>, f64)>;

    /// Appends one token; returns the next-token log-probabilities.
    fn extend(
        &self,
        cache: &mut Self::Cache,
        token: TokenId,
        counters: &mut CostCounters,
    ) -> Result<Vec<f64>>;

    fn cache_len(cache: &Self::Cache) -> usize;

    /// `log p(tokens[i] | tokens[..i], class)` for `i >= 1`.
    fn sequence_log_probs(
        &self,
        class: usize,
        tokens: &[TokenId],
        counters: &mut CostCounters,
    ) -> Result<Vec<f64>> {
        let (mut cache, mut next, _) = self.start(class, &tokens[..1], counters)?;
        let mut out = Vec::with_capacity(tokens.len().saturating_sub(1));
        for (i, &t) in tokens.iter().enumerate().skip(1) {
            out.push(next[t as usize]);
            if i + 1 < tokens.len() {
                next = self.extend(&mut cache, t, counters)?;
            }
        }
        Ok(out)
    }
}

/// Transformer class-conditional LM. Class `c` is signalled by the control
/// token `vocab_size + c` placed right after BOS.
#[derive(Debug, Clone)]
pub struct CcLm {
    pub model: Transformer,
    num_classes: usize,
    vocab_size: usize,
}

impl CcLm {
    pub fn new(model: Transformer, num_classes: usize) -> Result<Self> {
        let cfg = &model.config;
        if cfg.head_kind != HeadKind::Lm || num_classes < 2 || cfg.vocab_size <= num_classes {
            return Err(Error::Configuration(format!(
                "class-conditional LM needs an LM head over vocabulary plus {num_classes} control tokens"
            )));
        }
        let vocab_size = cfg.vocab_size - num_classes;
        Ok(Self {
            model,
            num_classes,
            vocab_size,
        })
    }

    pub fn control_token(&self, class: usize) -> TokenId {
        (self.vocab_size + class) as TokenId
    }

    /// `[BOS, control(class), tokens[1..]]`.
    pub fn conditioned(&self, class: usize, tokens: &[TokenId]) -> Vec<TokenId> {
        let mut seq = Vec::with_capacity(tokens.len() + 1);
        seq.push(BOS);
        seq.push(self.control_token(class));
        seq.extend_from_slice(&tokens[1..]);
        seq
    }

    fn check_context(&self, context: &[TokenId]) -> Result<()> {
        if context.first() != Some(&BOS) {
            return Err(Error::Validation("context must start with BOS".into()));
        }
        Ok(())
    }
}

impl ClassConditionalLm for CcLm {
    type Cache = IncrementalState;

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn start(
        &self,
        class: usize,
        context: &[TokenId],
        counters: &mut CostCounters,
    ) -> Result<(IncrementalState, Vec<f64>, f64)> {
        self.check_context(context)?;
        let seq = self.conditioned(class, context);
        let (state, logits) = self.model.prefill(&seq, counters)?;
        let ll = (1..context.len())
            .map(|i| log_softmax(logits.row(i))[context[i] as usize])
            .sum();
        Ok((state, log_softmax(logits.row(seq.len() - 1)), ll))
    }

    fn extend(
        &self,
        cache: &mut IncrementalState,
        token: TokenId,
        counters: &mut CostCounters,
    ) -> Result<Vec<f64>> {
        Ok(log_softmax(&self.model.forward_incremental(cache, token, counters)?))
    }

    fn cache_len(cache: &IncrementalState) -> usize {
        cache.len()
    }

    /// One full pass instead of token-by-token extension.
    fn sequence_log_probs(
        &self,
        class: usize,
        tokens: &[TokenId],
        counters: &mut CostCounters,
    ) -> Result<Vec<f64>> {
        self.check_context(tokens)?;
        let seq = self.conditioned(class, tokens);
        let logits = self.model.forward_full(&seq, counters)?;
        // position i+1 of `seq` predicts tokens[i+1]
        Ok((1..tokens.len())
            .map(|i| log_softmax(logits.row(i))[tokens[i] as usize])
            .collect())
    }
}

/// Bayes-rule classifier over a class-conditional LM.
#[derive(Debug, Clone)]
pub struct Gedi<M> {
    pub lm: M,
    /// Added to the per-class log-likelihoods; zeros mean a uniform prior.
    pub log_prior: Vec<f64>,
}

impl<M: ClassConditionalLm> Gedi<M> {
    pub fn new(lm: M) -> Self {
        let log_prior = vec![0.0; lm.num_classes()];
        Self { lm, log_prior }
    }

    pub fn with_log_prior(lm: M, log_prior: Vec<f64>) -> Result<Self> {
        if log_prior.len() != lm.num_classes() || log_prior.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("log prior must be finite, one per class".into()));
        }
        Ok(Self { lm, log_prior })
    }

    /// `softmax(log_likelihoods + log_prior)`.
    pub fn posterior_from(&self, log_likelihoods: &[f64]) -> ClassPosterior {
        let scores: Vec<f64> = log_likelihoods
            .iter()
            .zip(&self.log_prior)
            .map(|(l, p)| l + p)
            .collect();
        ClassPosterior::from_log_scores(&scores)
    }

    /// Posterior of every prefix `tokens[..=t]`, using one pass per class.
    pub fn prefix_posteriors(
        &self,
        tokens: &[TokenId],
        counters: &mut CostCounters,
    ) -> Result<Vec<ClassPosterior>> {
        let per_class: Vec<Vec<f64>> = (0..self.lm.num_classes())
            .map(|c| self.lm.sequence_log_probs(c, tokens, counters))
            .collect::<Result<_>>()?;
        let mut ll = vec![0.0; per_class.len()];
        let mut out = vec![self.posterior_from(&ll)];
        for i in 0..tokens.len() - 1 {
            for (l, lp) in ll.iter_mut().zip(&per_class) {
                *l += lp[i];
            }
            out.push(self.posterior_from(&ll));
        }
        Ok(out)
    }

    /// Encodes `context` under every class (`|C|` forwards).
    pub fn start_state(
        &self,
        context: &[TokenId],
        counters: &mut CostCounters,
    ) -> Result<(GediState<M::Cache>, ClassPosterior)> {
        let n = self.lm.num_classes();
        let mut caches = Vec::with_capacity(n);
        let mut next = Vec::with_capacity(n);
        let mut ll = vec![0.0; n];
        for (c, l) in ll.iter_mut().enumerate() {
            let (cache, lp, context_ll) = self.lm.start(c, context, counters)?;
            *l = context_ll;
            caches.push(cache);
            next.push(lp);
        }
        let posterior = self.posterior_from(&ll);
        Ok((
            GediState {
                caches: Arc::new(caches),
                pending: None,
                log_likelihoods: ll,
                next: Some(Arc::new(next)),
            },
            posterior,
        ))
    }

    /// Runs the pending token through every class cache (`|C|` forwards)
    /// so the next-token distributions of the full sequence are known.
    fn materialize(&self, state: &mut GediState<M::Cache>, counters: &mut CostCounters) -> Result<()> {
        if state.next.is_some() {
            return Ok(());
        }
        let token = state
            .pending
            .ok_or_else(|| Error::State("generative state has neither cache nor pending token".into()))?;
        let len = M::cache_len(&state.caches[0]);
        if state.caches.iter().any(|c| M::cache_len(c) != len) {
            return Err(Error::State("per-class caches have different lengths".into()));
        }
        let mut caches: Vec<M::Cache> = state.caches.iter().cloned().collect();
        let mut next = Vec::with_capacity(caches.len());
        for cache in &mut caches {
            next.push(self.lm.extend(cache, token, counters)?);
        }
        state.caches = Arc::new(caches);
        state.pending = None;
        state.next = Some(Arc::new(next));
        Ok(())
    }

    /// Posterior of the state's sequence extended by `token`, with the
    /// state for that extension. Costs `|C|` forwards the first time any
    /// child of `state` is requested and nothing afterwards.
    pub fn extend_state(
        &self,
        state: &mut GediState<M::Cache>,
        token: TokenId,
        counters: &mut CostCounters,
    ) -> Result<(GediState<M::Cache>, ClassPosterior)> {
        if token as usize >= self.lm.vocab_size() {
            return Err(Error::Validation(format!(
                "token {token} outside vocabulary of {}",
                self.lm.vocab_size()
            )));
        }
        self.materialize(state, counters)?;
        let next = state.next.as_ref().expect("materialized");
        let ll: Vec<f64> = state
            .log_likelihoods
            .iter()
            .zip(next.iter())
            .map(|(l, lp)| l + lp[token as usize])
            .collect();
        let posterior = self.posterior_from(&ll);
        Ok((
            GediState {
                caches: Arc::clone(&state.caches),
                pending: Some(token),
                log_likelihoods: ll,
                next: None,
            },
            posterior,
        ))
    }
}

/// Per-class caches and running log-likelihoods of one sequence.
///
/// The caches may lag one token behind the sequence (`pending`); that
/// token is pushed through only when the sequence's own continuations are
/// needed, so sibling states share their parent's caches.
#[derive(Debug, Clone)]
pub struct GediState<C> {
    caches: Arc<Vec<C>>,
    pending: Option<TokenId>,
    log_likelihoods: Vec<f64>,
    next: Option<Arc<Vec<Vec<f64>>>>,
}

impl<C> GediState<C> {
    /// `Σ_t log p(x_t | x_<t, c)` for each class.
    pub fn log_likelihoods(&self) -> &[f64] {
        &self.log_likelihoods
    }
}

/// Sequential Bayes update: extends `state` by `new_token` in place.
pub fn gedi_class_posterior<M: ClassConditionalLm>(
    gedi: &Gedi<M>,
    state: &mut GediState<M::Cache>,
    new_token: TokenId,
    counters: &mut CostCounters,
) -> Result<ClassPosterior> {
    let (next, posterior) = gedi.extend_state(state, new_token, counters)?;
    *state = next;
    Ok(posterior)
}

impl<M: ClassConditionalLm + Sync> ValueSource for Gedi<M>
where
    M::Cache: Send,
{
    type State = GediState<M::Cache>;

    fn num_classes(&self) -> usize {
        self.lm.num_classes()
    }

    fn vocab_size(&self) -> usize {
        self.lm.vocab_size()
    }

    fn start(&self, context: &[TokenId], counters: &mut CostCounters) -> Result<(Self::State, ClassPosterior)> {
        self.start_state(context, counters)
    }

    fn child(
        &self,
        parent: &mut Self::State,
        _parent_seq: &[TokenId],
        token: TokenId,
        counters: &mut CostCounters,
    ) -> Result<(Self::State, ClassPosterior)> {
        self.extend_state(parent, token, counters)
    }

    fn scores_eos(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Bidirectional,
    Unidirectional,
    Generative,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Bidirectional, Family::Unidirectional, Family::Generative];

    /// Short name used on the command line and in output files.
    pub fn short_name(self) -> &'static str {
        match self {
            Family::Bidirectional => "bi",
            Family::Unidirectional => "uni",
            Family::Generative => "gedi",
        }
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bi" | "bidirectional" => Ok(Family::Bidirectional),
            "uni" | "unidirectional" => Ok(Family::Unidirectional),
            "gedi" | "generative" => Ok(Family::Generative),
            other => Err(Error::Configuration(format!(
                "unknown discriminator family {other:?} (expected bi, uni or gedi)"
            ))),
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.short_name())
    }
}

/// Any of the three discriminator families behind one type.
#[derive(Debug, Clone)]
pub enum Discriminator {
    Bidirectional(Transformer),
    Unidirectional(Transformer),
    Generative(Gedi<CcLm>),
}

#[derive(Debug, Clone)]
pub enum DiscState {
    Stateless,
    Causal(IncrementalState),
    Generative(GediState<IncrementalState>),
}

impl Discriminator {
    pub fn bidirectional(model: Transformer) -> Result<Self> {
        require(&model, MaskMode::Bidirectional, "bidirectional")?;
        Ok(Self::Bidirectional(model))
    }

    pub fn unidirectional(model: Transformer) -> Result<Self> {
        require(&model, MaskMode::Causal, "unidirectional")?;
        Ok(Self::Unidirectional(model))
    }

    pub fn generative(model: Transformer, num_classes: usize) -> Result<Self> {
        Ok(Self::Generative(Gedi::new(CcLm::new(model, num_classes)?)))
    }

    pub fn family(&self) -> Family {
        match self {
            Self::Bidirectional(_) => Family::Bidirectional,
            Self::Unidirectional(_) => Family::Unidirectional,
            Self::Generative(_) => Family::Generative,
        }
    }

    /// Posterior of a whole sequence.
    pub fn posterior(&self, tokens: &[TokenId], counters: &mut CostCounters) -> Result<ClassPosterior> {
        match self {
            Self::Bidirectional(m) => score_sequence_bidirectional(m, tokens, counters),
            Self::Unidirectional(m) => {
                let logits = m.forward_full(tokens, counters)?;
                Ok(ClassPosterior::from_log_scores(logits.row(0)))
            }
            Self::Generative(g) => Ok(g.prefix_posteriors(tokens, counters)?.pop().unwrap()),
        }
    }

    /// Posterior of every prefix `tokens[..=t]`. Causal families need one
    /// pass (per class for the generative one); the bidirectional family
    /// re-encodes each prefix.
    pub fn prefix_posteriors(
        &self,
        tokens: &[TokenId],
        counters: &mut CostCounters,
    ) -> Result<Vec<ClassPosterior>> {
        match self {
            Self::Bidirectional(m) => (1..=tokens.len())
                .map(|t| score_sequence_bidirectional(m, &tokens[..t], counters))
                .collect(),
            Self::Unidirectional(m) => {
                let logits = m.classify_all_prefixes(tokens, counters)?;
                Ok((0..tokens.len())
                    .map(|t| ClassPosterior::from_log_scores(logits.row(t)))
                    .collect())
            }
            Self::Generative(g) => g.prefix_posteriors(tokens, counters),
        }
    }
}

impl ValueSource for Discriminator {
    type State = DiscState;

    fn num_classes(&self) -> usize {
        match self {
            Self::Bidirectional(m) | Self::Unidirectional(m) => m.config.num_classes,
            Self::Generative(g) => g.lm.num_classes(),
        }
    }

    fn vocab_size(&self) -> usize {
        match self {
            Self::Bidirectional(m) | Self::Unidirectional(m) => m.config.vocab_size,
            Self::Generative(g) => g.lm.vocab_size(),
        }
    }

    fn start(&self, context: &[TokenId], counters: &mut CostCounters) -> Result<(DiscState, ClassPosterior)> {
        match self {
            Self::Bidirectional(m) => Ok((
                DiscState::Stateless,
                score_sequence_bidirectional(m, context, counters)?,
            )),
            Self::Unidirectional(m) => {
                let (state, logits) = m.prefill(context, counters)?;
                let posterior = ClassPosterior::from_log_scores(logits.row(context.len() - 1));
                Ok((DiscState::Causal(state), posterior))
            }
            Self::Generative(g) => {
                let (state, posterior) = g.start_state(context, counters)?;
                Ok((DiscState::Generative(state), posterior))
            }
        }
    }

    fn child(
        &self,
        parent: &mut DiscState,
        parent_seq: &[TokenId],
        token: TokenId,
        counters: &mut CostCounters,
    ) -> Result<(DiscState, ClassPosterior)> {
        match (self, parent) {
            (Self::Bidirectional(m), DiscState::Stateless) => {
                let mut seq = Vec::with_capacity(parent_seq.len() + 1);
                seq.extend_from_slice(parent_seq);
                seq.push(token);
                Ok((DiscState::Stateless, score_sequence_bidirectional(m, &seq, counters)?))
            }
            (Self::Unidirectional(m), DiscState::Causal(state)) => {
                if state.len() != parent_seq.len() {
                    return Err(Error::State(format!(
                        "cache covers {} tokens, sequence has {}",
                        state.len(),
                        parent_seq.len()
                    )));
                }
                let mut child = fork_state(state);
                let posterior = score_sequence_unidirectional(m, &mut child, token, counters)?;
                Ok((DiscState::Causal(child), posterior))
            }
            (Self::Generative(g), DiscState::Generative(state)) => {
                let (child, posterior) = g.extend_state(state, token, counters)?;
                Ok((DiscState::Generative(child), posterior))
            }
            _ => Err(Error::State("state belongs to a different discriminator family".into())),
        }
    }

    fn scores_eos(&self) -> bool {
        matches!(self, Self::Generative(_))
    }
}

/// Value source that knows nothing: uniform posterior at zero cost. Used
/// when the search value comes from the LM alone.
#[derive(Debug, Clone, Copy)]
pub struct NullGuide {
    pub num_classes: usize,
    pub vocab_size: usize,
}

impl ValueSource for NullGuide {
    type State = ();

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn start(&self, _context: &[TokenId], _counters: &mut CostCounters) -> Result<((), ClassPosterior)> {
        Ok(((), ClassPosterior::uniform(self.num_classes)))
    }

    fn child(
        &self,
        _parent: &mut (),
        _parent_seq: &[TokenId],
        _token: TokenId,
        _counters: &mut CostCounters,
    ) -> Result<((), ClassPosterior)> {
        Ok(((), ClassPosterior::uniform(self.num_classes)))
    }

    fn scores_eos(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests;
