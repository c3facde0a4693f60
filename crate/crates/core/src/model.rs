//! Tiny pre-LayerNorm transformer shared by every model in the crate.
//!
//! One backbone, two heads (next-token LM head or last-token classifier
//! head) and two attention masks (bidirectional or causal). Causal models
//! support incremental decoding through [`IncrementalState`], which caches
//! per-layer keys and values.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{TokenId, L_MAX};
use crate::error::{Error, Result};
use crate::numerics::{
    dot, gelu, gelu_grad, layer_norm_rows, layer_norm_rows_backward, linear_rows,
    linear_rows_backward, Matrix,
};
use crate::profiling::CostCounters;

pub mod checkpoint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Lm,
    Classifier,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    Bidirectional,
    Causal,
}

/// Size of the shared backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Backbone {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub max_positions: usize,
}

impl Default for Backbone {
    fn default() -> Self {
        Self {
            num_layers: 4,
            hidden_size: 128,
            num_heads: 4,
            max_positions: 80,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub head_kind: HeadKind,
    /// Zero for LM heads.
    pub num_classes: usize,
    pub mask_mode: MaskMode,
}

impl ModelConfig {
    pub fn lm(backbone: Backbone, vocab_size: usize) -> Result<Self> {
        let c = Self::from_backbone(backbone, vocab_size, HeadKind::Lm, 0, MaskMode::Causal);
        c.validate()?;
        Ok(c)
    }

    pub fn classifier(
        backbone: Backbone,
        vocab_size: usize,
        num_classes: usize,
        mask_mode: MaskMode,
    ) -> Result<Self> {
        let c = Self::from_backbone(backbone, vocab_size, HeadKind::Classifier, num_classes, mask_mode);
        c.validate()?;
        Ok(c)
    }

    fn from_backbone(
        b: Backbone,
        vocab_size: usize,
        head_kind: HeadKind,
        num_classes: usize,
        mask_mode: MaskMode,
    ) -> Self {
        Self {
            num_layers: b.num_layers,
            hidden_size: b.hidden_size,
            num_heads: b.num_heads,
            max_positions: b.max_positions,
            vocab_size,
            head_kind,
            num_classes,
            mask_mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Configuration(m));
        if self.num_layers == 0 || self.hidden_size == 0 || self.num_heads == 0 {
            return bad("layers, hidden size and heads must be positive".into());
        }
        if self.hidden_size % self.num_heads != 0 {
            return bad(format!(
                "hidden size {} not divisible by {} heads",
                self.hidden_size, self.num_heads
            ));
        }
        if self.max_positions < L_MAX {
            return bad(format!("max_positions {} < {L_MAX}", self.max_positions));
        }
        if self.vocab_size == 0 {
            return bad("empty vocabulary".into());
        }
        match self.head_kind {
            HeadKind::Classifier if self.num_classes < 2 => {
                bad(format!("classifier needs >= 2 classes, got {}", self.num_classes))
            }
            HeadKind::Lm if self.mask_mode != MaskMode::Causal => {
                bad("language-model heads require the causal mask".into())
            }
            _ => Ok(()),
        }
    }

    pub fn backbone(&self) -> Backbone {
        Backbone {
            num_layers: self.num_layers,
            hidden_size: self.hidden_size,
            num_heads: self.num_heads,
            max_positions: self.max_positions,
        }
    }

    pub fn head_width(&self) -> usize {
        match self.head_kind {
            HeadKind::Lm => self.vocab_size,
            HeadKind::Classifier => self.num_classes,
        }
    }

    pub fn ff_size(&self) -> usize {
        4 * self.hidden_size
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    /// Attention scores for one full pass over `t` tokens.
    pub fn full_pass_scores(&self, t: u64) -> u64 {
        let per_head = match self.mask_mode {
            MaskMode::Causal => t * (t + 1) / 2,
            MaskMode::Bidirectional => t * t,
        };
        (self.num_layers * self.num_heads) as u64 * per_head
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Vec<f64>,
    pub ln1_bias: Vec<f64>,
    pub wq: Matrix,
    pub bq: Vec<f64>,
    pub wk: Matrix,
    pub bk: Vec<f64>,
    pub wv: Matrix,
    pub bv: Vec<f64>,
    pub wo: Matrix,
    pub bo: Vec<f64>,
    pub ln2_gain: Vec<f64>,
    pub ln2_bias: Vec<f64>,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

/// All weights. Matrices are stored `(in, out)` so a layer computes `x · W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub tok_emb: Matrix,
    pub pos_emb: Matrix,
    pub layers: Vec<LayerParams>,
    pub lnf_gain: Vec<f64>,
    pub lnf_bias: Vec<f64>,
    pub head_w: Matrix,
    pub head_b: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(config: &ModelConfig) -> Self {
        let h = config.hidden_size;
        let f = config.ff_size();
        let layer = || LayerParams {
            ln1_gain: vec![0.0; h],
            ln1_bias: vec![0.0; h],
            wq: Matrix::zeros(h, h),
            bq: vec![0.0; h],
            wk: Matrix::zeros(h, h),
            bk: vec![0.0; h],
            wv: Matrix::zeros(h, h),
            bv: vec![0.0; h],
            wo: Matrix::zeros(h, h),
            bo: vec![0.0; h],
            ln2_gain: vec![0.0; h],
            ln2_bias: vec![0.0; h],
            w1: Matrix::zeros(h, f),
            b1: vec![0.0; f],
            w2: Matrix::zeros(f, h),
            b2: vec![0.0; h],
        };
        Self {
            tok_emb: Matrix::zeros(config.vocab_size, h),
            pos_emb: Matrix::zeros(config.max_positions, h),
            layers: (0..config.num_layers).map(|_| layer()).collect(),
            lnf_gain: vec![0.0; h],
            lnf_bias: vec![0.0; h],
            head_w: Matrix::zeros(h, config.head_width()),
            head_b: vec![0.0; config.head_width()],
        }
    }

    /// Normal(0, 0.02) matrices, zero biases, unit norm gains.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut p = Self::zeros(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).unwrap();
        let mask = p.decay_mask();
        for (slice, is_matrix) in p.slices_mut().into_iter().zip(mask) {
            if is_matrix {
                slice.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
            }
        }
        for l in &mut p.layers {
            l.ln1_gain.fill(1.0);
            l.ln2_gain.fill(1.0);
        }
        p.lnf_gain.fill(1.0);
        p
    }

    /// Every tensor in the fixed serialization order: token embeddings,
    /// position embeddings, then per layer (ln1 gain, ln1 bias, Wq, bq, Wk,
    /// bk, Wv, bv, Wo, bo, ln2 gain, ln2 bias, W1, b1, W2, b2), then the final
    /// norm gain and bias, the head matrix and the head bias.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = vec![self.tok_emb.data(), self.pos_emb.data()];
        for l in &self.layers {
            v.extend([
                &l.ln1_gain[..],
                &l.ln1_bias,
                l.wq.data(),
                &l.bq,
                l.wk.data(),
                &l.bk,
                l.wv.data(),
                &l.bv,
                l.wo.data(),
                &l.bo,
                &l.ln2_gain,
                &l.ln2_bias,
                l.w1.data(),
                &l.b1,
                l.w2.data(),
                &l.b2,
            ]);
        }
        v.extend([&self.lnf_gain[..], &self.lnf_bias, self.head_w.data(), &self.head_b]);
        v
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = vec![self.tok_emb.data_mut(), self.pos_emb.data_mut()];
        for l in &mut self.layers {
            v.push(&mut l.ln1_gain);
            v.push(&mut l.ln1_bias);
            v.push(l.wq.data_mut());
            v.push(&mut l.bq);
            v.push(l.wk.data_mut());
            v.push(&mut l.bk);
            v.push(l.wv.data_mut());
            v.push(&mut l.bv);
            v.push(l.wo.data_mut());
            v.push(&mut l.bo);
            v.push(&mut l.ln2_gain);
            v.push(&mut l.ln2_bias);
            v.push(l.w1.data_mut());
            v.push(&mut l.b1);
            v.push(l.w2.data_mut());
            v.push(&mut l.b2);
        }
        v.push(&mut self.lnf_gain);
        v.push(&mut self.lnf_bias);
        v.push(self.head_w.data_mut());
        v.push(&mut self.head_b);
        v
    }

    /// `true` for matrices (weight-decayed, randomly initialized), aligned with `slices`.
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut v = vec![true, true];
        for _ in &self.layers {
            v.extend([
                false, false, true, false, true, false, true, false, true, false, false, false,
                true, false, true, false,
            ]);
        }
        v.extend([false, false, true, false]);
        v
    }

    pub fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn fill_zero(&mut self) {
        self.slices_mut().into_iter().for_each(|s| s.fill(0.0));
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// Largest absolute elementwise difference; `None` if shapes differ.
    pub fn max_abs_diff(&self, other: &ModelParams) -> Option<f64> {
        let (a, b) = (self.slices(), other.slices());
        if a.len() != b.len() || a.iter().zip(&b).any(|(x, y)| x.len() != y.len()) {
            return None;
        }
        Some(
            a.iter()
                .zip(&b)
                .flat_map(|(x, y)| x.iter().zip(y.iter()).map(|(p, q)| (p - q).abs()))
                .fold(0.0, f64::max),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerCache {
    keys: Vec<f64>,
    values: Vec<f64>,
}

/// Cached keys/values of a causal model for positions `0..len`.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementalState {
    layers: Vec<LayerCache>,
    len: usize,
    hidden: usize,
}

impl IncrementalState {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        if config.mask_mode != MaskMode::Causal {
            return Err(Error::Mode("incremental state requires the causal mask".into()));
        }
        Ok(Self {
            layers: (0..config.num_layers)
                .map(|_| LayerCache {
                    keys: Vec::new(),
                    values: Vec::new(),
                })
                .collect(),
            len: 0,
            hidden: config.hidden_size,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn check(&self, config: &ModelConfig) -> Result<()> {
        if self.layers.len() != config.num_layers || self.hidden != config.hidden_size {
            return Err(Error::State("incremental state built for a different model".into()));
        }
        Ok(())
    }
}

/// Deep copy; the two states share no storage afterwards.
pub fn fork_state(state: &IncrementalState) -> IncrementalState {
    state.clone()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transformer {
    pub config: ModelConfig,
    pub params: ModelParams,
}

/// Saved intermediates of one training forward pass.
#[derive(Debug, Clone)]
pub(crate) struct Activations {
    tokens: Vec<TokenId>,
    layers: Vec<LayerActs>,
    xhatf: Vec<f64>,
    rstdf: Vec<f64>,
    hf: Vec<f64>,
}

#[derive(Debug, Clone)]
struct LayerActs {
    xhat1: Vec<f64>,
    rstd1: Vec<f64>,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `heads x n x n`, zero where masked.
    probs: Vec<f64>,
    o: Vec<f64>,
    xhat2: Vec<f64>,
    rstd2: Vec<f64>,
    c: Vec<f64>,
    u: Vec<f64>,
    z: Vec<f64>,
}

impl Transformer {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            params: ModelParams::init(&config, seed),
            config,
        })
    }

    pub fn from_parts(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        if ModelParams::zeros(&config).max_abs_diff(&params).is_none() {
            return Err(Error::Dimension("parameter shapes do not match the config".into()));
        }
        Ok(Self { config, params })
    }

    fn check_tokens(&self, tokens: &[TokenId], start: usize) -> Result<()> {
        if tokens.is_empty() && start == 0 {
            return Err(Error::Validation("empty input sequence".into()));
        }
        if start + tokens.len() > self.config.max_positions {
            return Err(Error::Capacity {
                len: start + tokens.len(),
                max: self.config.max_positions,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Validation(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Runs the backbone over `tokens` placed after the cached positions (if
    /// any) and returns the final-normed hidden rows of the new tokens.
    fn run(
        &self,
        tokens: &[TokenId],
        mut cache: Option<&mut IncrementalState>,
        counters: &mut CostCounters,
    ) -> Vec<f64> {
        let cfg = &self.config;
        let (h, nh, hd) = (cfg.hidden_size, cfg.num_heads, cfg.head_dim());
        let n = tokens.len();
        let p0 = cache.as_ref().map_or(0, |c| c.len);
        let causal = cfg.mask_mode == MaskMode::Causal;

        let mut x = vec![0.0; n * h];
        for (i, &t) in tokens.iter().enumerate() {
            let row = &mut x[i * h..(i + 1) * h];
            for ((r, e), p) in row
                .iter_mut()
                .zip(self.params.tok_emb.row(t as usize))
                .zip(self.params.pos_emb.row(p0 + i))
            {
                *r = e + p;
            }
        }

        let mut a = vec![0.0; n * h];
        let (mut q, mut k, mut v) = (vec![0.0; n * h], vec![0.0; n * h], vec![0.0; n * h]);
        let mut o = vec![0.0; n * h];
        let mut proj = vec![0.0; n * h];
        let mut u = vec![0.0; n * cfg.ff_size()];
        let mut scores = Vec::new();
        let mut key_count = 0u64;

        for (li, lp) in self.params.layers.iter().enumerate() {
            layer_norm_rows(&x, &lp.ln1_gain, &lp.ln1_bias, &mut a, None);
            linear_rows(&a, &lp.wq, &lp.bq, &mut q);
            linear_rows(&a, &lp.wk, &lp.bk, &mut k);
            linear_rows(&a, &lp.wv, &lp.bv, &mut v);
            let (keys, values): (&[f64], &[f64]) = match cache.as_deref_mut() {
                Some(c) => {
                    let lc = &mut c.layers[li];
                    lc.keys.extend_from_slice(&k);
                    lc.values.extend_from_slice(&v);
                    (&lc.keys, &lc.values)
                }
                None => (&k, &v),
            };
            for i in 0..n {
                let visible = if causal { p0 + i + 1 } else { n };
                key_count += visible as u64;
                attend_row(
                    &q[i * h..(i + 1) * h],
                    keys,
                    values,
                    visible,
                    nh,
                    hd,
                    &mut o[i * h..(i + 1) * h],
                    &mut scores,
                    None,
                );
            }
            linear_rows(&o, &lp.wo, &lp.bo, &mut proj);
            x.iter_mut().zip(&proj).for_each(|(xi, p)| *xi += p);

            layer_norm_rows(&x, &lp.ln2_gain, &lp.ln2_bias, &mut a, None);
            linear_rows(&a, &lp.w1, &lp.b1, &mut u);
            u.iter_mut().for_each(|e| *e = gelu(*e));
            linear_rows(&u, &lp.w2, &lp.b2, &mut proj);
            x.iter_mut().zip(&proj).for_each(|(xi, p)| *xi += p);
        }
        if let Some(c) = cache {
            c.len += n;
        }
        layer_norm_rows(&x, &self.params.lnf_gain, &self.params.lnf_bias, &mut a, None);

        counters.forward_passes += 1;
        counters.tokens_scored += n as u64;
        counters.attention_scores += key_count * nh as u64;
        a
    }

    fn head(&self, hidden_rows: &[f64]) -> Matrix {
        let rows = hidden_rows.len() / self.config.hidden_size;
        let mut out = Matrix::zeros(rows, self.config.head_width());
        linear_rows(hidden_rows, &self.params.head_w, &self.params.head_b, out.data_mut());
        out
    }

    fn last_row<'a>(&self, rows: &'a [f64]) -> &'a [f64] {
        &rows[rows.len() - self.config.hidden_size..]
    }

    /// LM head: `(len, |V|)` next-token logits for every position.
    /// Classifier head: `(1, |C|)` logits read from the last token.
    pub fn forward_full(&self, tokens: &[TokenId], counters: &mut CostCounters) -> Result<Matrix> {
        self.check_tokens(tokens, 0)?;
        let hf = self.run(tokens, None, counters);
        Ok(match self.config.head_kind {
            HeadKind::Lm => self.head(&hf),
            HeadKind::Classifier => self.head(self.last_row(&hf)),
        })
    }

    /// Final-normed contextual embeddings, `(len, hidden)`.
    pub fn contextual_embeddings(
        &self,
        tokens: &[TokenId],
        counters: &mut CostCounters,
    ) -> Result<Matrix> {
        self.check_tokens(tokens, 0)?;
        let hf = self.run(tokens, None, counters);
        Matrix::from_vec(tokens.len(), self.config.hidden_size, hf)
    }

    /// Causal classifier only: class logits for every prefix, `(len, |C|)`,
    /// from a single pass.
    pub fn classify_all_prefixes(
        &self,
        tokens: &[TokenId],
        counters: &mut CostCounters,
    ) -> Result<Matrix> {
        if self.config.mask_mode != MaskMode::Causal || self.config.head_kind != HeadKind::Classifier {
            return Err(Error::Mode("prefix scoring needs a causal classifier".into()));
        }
        self.check_tokens(tokens, 0)?;
        let hf = self.run(tokens, None, counters);
        Ok(self.head(&hf))
    }

    /// Full causal pass that also returns the cache. Returns per-position
    /// head outputs for every position of `tokens` (one forward pass).
    pub fn prefill(
        &self,
        tokens: &[TokenId],
        counters: &mut CostCounters,
    ) -> Result<(IncrementalState, Matrix)> {
        let mut state = IncrementalState::new(&self.config)?;
        self.check_tokens(tokens, 0)?;
        let hf = self.run(tokens, Some(&mut state), counters);
        Ok((state, self.head(&hf)))
    }

    /// Appends one token to `state` and returns the head output at the new
    /// last position.
    pub fn forward_incremental(
        &self,
        state: &mut IncrementalState,
        token: TokenId,
        counters: &mut CostCounters,
    ) -> Result<Vec<f64>> {
        if self.config.mask_mode != MaskMode::Causal {
            return Err(Error::Mode("incremental decoding on a bidirectional model".into()));
        }
        state.check(&self.config)?;
        self.check_tokens(&[token], state.len)?;
        let hf = self.run(&[token], Some(state), counters);
        Ok(self.head(&hf).data().to_vec())
    }

    /// Training forward over a whole sequence, keeping every intermediate.
    /// Output as in `forward_full`.
    pub(crate) fn forward_train(&self, tokens: &[TokenId]) -> Result<(Matrix, Activations)> {
        self.check_tokens(tokens, 0)?;
        let cfg = &self.config;
        let (h, nh, hd, f) = (cfg.hidden_size, cfg.num_heads, cfg.head_dim(), cfg.ff_size());
        let n = tokens.len();
        let causal = cfg.mask_mode == MaskMode::Causal;

        let mut x = vec![0.0; n * h];
        for (i, &t) in tokens.iter().enumerate() {
            for ((r, e), p) in x[i * h..(i + 1) * h]
                .iter_mut()
                .zip(self.params.tok_emb.row(t as usize))
                .zip(self.params.pos_emb.row(i))
            {
                *r = e + p;
            }
        }
        let mut layers = Vec::with_capacity(cfg.num_layers);
        let mut scores = Vec::new();
        let mut proj = vec![0.0; n * h];
        for lp in &self.params.layers {
            let mut acts = LayerActs {
                xhat1: vec![0.0; n * h],
                rstd1: vec![0.0; n],
                a: vec![0.0; n * h],
                q: vec![0.0; n * h],
                k: vec![0.0; n * h],
                v: vec![0.0; n * h],
                probs: vec![0.0; nh * n * n],
                o: vec![0.0; n * h],
                xhat2: vec![0.0; n * h],
                rstd2: vec![0.0; n],
                c: vec![0.0; n * h],
                u: vec![0.0; n * f],
                z: vec![0.0; n * f],
            };
            layer_norm_rows(
                &x,
                &lp.ln1_gain,
                &lp.ln1_bias,
                &mut acts.a,
                Some((&mut acts.xhat1, &mut acts.rstd1)),
            );
            linear_rows(&acts.a, &lp.wq, &lp.bq, &mut acts.q);
            linear_rows(&acts.a, &lp.wk, &lp.bk, &mut acts.k);
            linear_rows(&acts.a, &lp.wv, &lp.bv, &mut acts.v);
            let mut row_probs = vec![0.0; nh * n];
            for i in 0..n {
                let visible = if causal { i + 1 } else { n };
                attend_row(
                    &acts.q[i * h..(i + 1) * h],
                    &acts.k,
                    &acts.v,
                    visible,
                    nh,
                    hd,
                    &mut acts.o[i * h..(i + 1) * h],
                    &mut scores,
                    Some(&mut row_probs),
                );
                for head in 0..nh {
                    let dst = &mut acts.probs[(head * n + i) * n..(head * n + i) * n + visible];
                    dst.copy_from_slice(&row_probs[head * visible..(head + 1) * visible]);
                }
            }
            linear_rows(&acts.o, &lp.wo, &lp.bo, &mut proj);
            x.iter_mut().zip(&proj).for_each(|(xi, p)| *xi += p);
            layer_norm_rows(
                &x,
                &lp.ln2_gain,
                &lp.ln2_bias,
                &mut acts.c,
                Some((&mut acts.xhat2, &mut acts.rstd2)),
            );
            linear_rows(&acts.c, &lp.w1, &lp.b1, &mut acts.u);
            for (z, u) in acts.z.iter_mut().zip(&acts.u) {
                *z = gelu(*u);
            }
            linear_rows(&acts.z, &lp.w2, &lp.b2, &mut proj);
            x.iter_mut().zip(&proj).for_each(|(xi, p)| *xi += p);
            layers.push(acts);
        }
        let mut hf = vec![0.0; n * h];
        let mut xhatf = vec![0.0; n * h];
        let mut rstdf = vec![0.0; n];
        layer_norm_rows(
            &x,
            &self.params.lnf_gain,
            &self.params.lnf_bias,
            &mut hf,
            Some((&mut xhatf, &mut rstdf)),
        );
        let out = match cfg.head_kind {
            HeadKind::Lm => self.head(&hf),
            HeadKind::Classifier => self.head(self.last_row(&hf)),
        };
        Ok((
            out,
            Activations {
                tokens: tokens.to_vec(),
                layers,
                xhatf,
                rstdf,
                hf,
            },
        ))
    }

    /// Accumulates parameter gradients of a scalar loss into `grads`, given
    /// the loss gradient w.r.t. the head output of `forward_train`.
    pub(crate) fn backward(&self, acts: &Activations, dout: &Matrix, grads: &mut ModelParams) {
        let cfg = &self.config;
        let (h, nh, hd) = (cfg.hidden_size, cfg.num_heads, cfg.head_dim());
        let n = acts.tokens.len();
        let causal = cfg.mask_mode == MaskMode::Causal;
        let scale = 1.0 / (hd as f64).sqrt();

        let mut dhf = vec![0.0; n * h];
        match cfg.head_kind {
            HeadKind::Lm => linear_rows_backward(
                &acts.hf,
                &self.params.head_w,
                dout.data(),
                &mut grads.head_w,
                &mut grads.head_b,
                Some(&mut dhf),
            ),
            HeadKind::Classifier => linear_rows_backward(
                &acts.hf[(n - 1) * h..],
                &self.params.head_w,
                dout.data(),
                &mut grads.head_w,
                &mut grads.head_b,
                Some(&mut dhf[(n - 1) * h..]),
            ),
        }
        let mut dx = vec![0.0; n * h];
        layer_norm_rows_backward(
            &acts.xhatf,
            &acts.rstdf,
            &self.params.lnf_gain,
            &dhf,
            &mut grads.lnf_gain,
            &mut grads.lnf_bias,
            &mut dx,
        );

        let f = cfg.ff_size();
        for (li, lp) in self.params.layers.iter().enumerate().rev() {
            let la = &acts.layers[li];
            let g = &mut grads.layers[li];

            // feed-forward block: x_out = x_mid + W2 gelu(W1 ln2(x_mid))
            let mut dz = vec![0.0; n * f];
            linear_rows_backward(&la.z, &lp.w2, &dx, &mut g.w2, &mut g.b2, Some(&mut dz));
            for (d, u) in dz.iter_mut().zip(&la.u) {
                *d *= gelu_grad(*u);
            }
            let mut dc = vec![0.0; n * h];
            linear_rows_backward(&la.c, &lp.w1, &dz, &mut g.w1, &mut g.b1, Some(&mut dc));
            layer_norm_rows_backward(
                &la.xhat2,
                &la.rstd2,
                &lp.ln2_gain,
                &dc,
                &mut g.ln2_gain,
                &mut g.ln2_bias,
                &mut dx,
            );

            // attention block: x_mid = x_in + Wo attn(ln1(x_in))
            let mut d_o = vec![0.0; n * h];
            linear_rows_backward(&la.o, &lp.wo, &dx, &mut g.wo, &mut g.bo, Some(&mut d_o));
            let (mut dq, mut dk, mut dv) = (vec![0.0; n * h], vec![0.0; n * h], vec![0.0; n * h]);
            let mut dp = vec![0.0; n];
            for head in 0..nh {
                let off = head * hd;
                for i in 0..n {
                    let visible = if causal { i + 1 } else { n };
                    let p = &la.probs[(head * n + i) * n..(head * n + i) * n + visible];
                    let do_i = &d_o[i * h + off..i * h + off + hd];
                    let mut s = 0.0;
                    for j in 0..visible {
                        dp[j] = dot(do_i, &la.v[j * h + off..j * h + off + hd]);
                        s += p[j] * dp[j];
                        let dv_j = &mut dv[j * h + off..j * h + off + hd];
                        for (d, o) in dv_j.iter_mut().zip(do_i) {
                            *d += p[j] * o;
                        }
                    }
                    let q_i = &la.q[i * h + off..i * h + off + hd];
                    for j in 0..visible {
                        let ds = p[j] * (dp[j] - s) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let k_j = &la.k[j * h + off..j * h + off + hd];
                        for (d, kv) in dq[i * h + off..i * h + off + hd].iter_mut().zip(k_j) {
                            *d += ds * kv;
                        }
                        for (d, qv) in dk[j * h + off..j * h + off + hd].iter_mut().zip(q_i) {
                            *d += ds * qv;
                        }
                    }
                }
            }
            let mut da = vec![0.0; n * h];
            linear_rows_backward(&la.a, &lp.wq, &dq, &mut g.wq, &mut g.bq, Some(&mut da));
            linear_rows_backward(&la.a, &lp.wk, &dk, &mut g.wk, &mut g.bk, Some(&mut da));
            linear_rows_backward(&la.a, &lp.wv, &dv, &mut g.wv, &mut g.bv, Some(&mut da));
            layer_norm_rows_backward(
                &la.xhat1,
                &la.rstd1,
                &lp.ln1_gain,
                &da,
                &mut g.ln1_gain,
                &mut g.ln1_bias,
                &mut dx,
            );
        }
        for (i, &t) in acts.tokens.iter().enumerate() {
            let d = &dx[i * h..(i + 1) * h];
            crate::numerics::axpy(grads.tok_emb.row_mut(t as usize), 1.0, d);
            crate::numerics::axpy(grads.pos_emb.row_mut(i), 1.0, d);
        }
    }
}

/// Multi-head attention for one query row over the first `visible` cached
/// keys. Summation order is fixed, so full and incremental passes agree
/// bit for bit.
#[allow(clippy::too_many_arguments)]
fn attend_row(
    q: &[f64],
    keys: &[f64],
    values: &[f64],
    visible: usize,
    num_heads: usize,
    head_dim: usize,
    out: &mut [f64],
    scores: &mut Vec<f64>,
    mut probs_out: Option<&mut [f64]>,
) {
    let h = num_heads * head_dim;
    let scale = 1.0 / (head_dim as f64).sqrt();
    scores.resize(visible, 0.0);
    out.fill(0.0);
    for head in 0..num_heads {
        let off = head * head_dim;
        let qh = &q[off..off + head_dim];
        let mut max = f64::NEG_INFINITY;
        for (j, s) in scores.iter_mut().enumerate() {
            *s = dot(qh, &keys[j * h + off..j * h + off + head_dim]) * scale;
            max = max.max(*s);
        }
        let mut sum = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            sum += *s;
        }
        let oh = &mut out[off..off + head_dim];
        for (j, s) in scores.iter_mut().enumerate() {
            *s /= sum;
            crate::numerics::axpy(oh, *s, &values[j * h + off..j * h + off + head_dim]);
        }
        if let Some(p) = probs_out.as_deref_mut() {
            p[head * visible..(head + 1) * visible].copy_from_slice(scores);
        }
    }
}

#[cfg(test)]
mod tests;
