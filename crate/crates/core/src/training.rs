//! Training loops for the generator LM, the two classifiers, the
//! class-conditional LM and the evaluation oracles.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{sample_training_prefix, LabeledCorpus, LabeledExample, TokenId, BOS, EOS, L_MAX};
use crate::discriminators::{CcLm, Gedi};
use crate::error::{Error, Result};
use crate::model::{Backbone, MaskMode, ModelConfig, ModelParams, Transformer};
use crate::numerics::{cross_entropy, cross_entropy_grad, log_softmax, Matrix, OptimizerState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub gradient_accumulation: usize,
    /// Peak rate; decays linearly to zero over all optimizer steps.
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Weight of the generative term in the class-conditional LM loss.
    pub lambda: f64,
    /// Global gradient-norm clip; zero disables.
    pub max_grad_norm: f64,
    pub seed: u64,
    pub backbone: Backbone,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            gradient_accumulation: 4,
            learning_rate: 3e-4,
            weight_decay: 0.01,
            lambda: 0.6,
            max_grad_norm: 1.0,
            seed: 0,
            backbone: Backbone::default(),
        }
    }
}

impl TrainConfig {
    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.gradient_accumulation
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.epochs == 0 || self.batch_size == 0 || self.gradient_accumulation == 0 {
            return bad("epochs, batch size and accumulation must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight decay {} must be >= 0", self.weight_decay));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda {} outside [0, 1]", self.lambda));
        }
        if !(self.max_grad_norm >= 0.0) {
            return bad("max_grad_norm must be >= 0".into());
        }
        Ok(())
    }
}

/// The checkpoints produced for one dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Lm,
    DiscBi,
    DiscUni,
    Cclm,
    OracleLm,
    OracleDisc,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] = [
        ModelKind::Lm,
        ModelKind::DiscBi,
        ModelKind::DiscUni,
        ModelKind::Cclm,
        ModelKind::OracleLm,
        ModelKind::OracleDisc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Lm => "lm",
            ModelKind::DiscBi => "disc_bi",
            ModelKind::DiscUni => "disc_uni",
            ModelKind::Cclm => "cclm",
            ModelKind::OracleLm => "oracle_lm",
            ModelKind::OracleDisc => "oracle_disc",
        }
    }

    pub fn metric_name(self) -> &'static str {
        match self {
            ModelKind::Lm | ModelKind::OracleLm => "perplexity",
            _ => "accuracy",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let normalized = s.replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|k| k.name() == normalized)
            .ok_or_else(|| Error::Configuration(format!("unknown model kind {s:?}")))
    }
}

/// One line of a metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    /// Perplexity for LMs, accuracy in percent for classifiers.
    pub metric: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: Transformer,
    pub kind: ModelKind,
    pub metrics: Vec<MetricRow>,
}

impl TrainedModel {
    pub fn train_losses(&self) -> Vec<f64> {
        self.metrics.iter().filter(|r| r.split == "train").map(|r| r.loss).collect()
    }
}

/// Writes `epoch,split,loss,<metric_name>`.
pub fn write_metrics_csv(path: &Path, rows: &[MetricRow], metric_name: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "split", "loss", metric_name])?;
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            r.split.clone(),
            format!("{:.6}", r.loss),
            format!("{:.6}", r.metric),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `λ · L_g + (1 − λ) · L_d` where `L_g` is the loss under the true class
/// and `L_d` the cross-entropy of `softmax(−losses)` against the label.
pub fn joint_loss(per_class_losses: &[f64], label: usize, lambda: f64) -> Result<f64> {
    check_joint(per_class_losses, label, lambda)?;
    let negated: Vec<f64> = per_class_losses.iter().map(|l| -l).collect();
    let l_d = cross_entropy(&negated, label)?;
    Ok(lambda * per_class_losses[label] + (1.0 - lambda) * l_d)
}

/// Gradient of [`joint_loss`] with respect to each per-class loss.
pub fn joint_loss_grad(per_class_losses: &[f64], label: usize, lambda: f64) -> Result<Vec<f64>> {
    check_joint(per_class_losses, label, lambda)?;
    let negated: Vec<f64> = per_class_losses.iter().map(|l| -l).collect();
    let p: Vec<f64> = log_softmax(&negated).into_iter().map(f64::exp).collect();
    Ok((0..p.len())
        .map(|c| {
            let y = if c == label { 1.0 } else { 0.0 };
            lambda * y + (1.0 - lambda) * (y - p[c])
        })
        .collect())
}

fn check_joint(losses: &[f64], label: usize, lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Parameter(format!("lambda {lambda} outside [0, 1]")));
    }
    if label >= losses.len() {
        return Err(Error::Index {
            index: label,
            len: losses.len(),
        });
    }
    Ok(())
}

/// `tokens` followed by EOS.
fn with_eos(tokens: &[TokenId]) -> Vec<TokenId> {
    let mut s = tokens.to_vec();
    s.push(EOS);
    s
}

/// Mean next-token cross-entropy of `seq` predicting positions `skip + 1..`,
/// and (if `grads` is given, scaled by `scale`) its parameter gradient.
fn lm_sequence_loss(
    model: &Transformer,
    seq: &[TokenId],
    skip: usize,
    grads: Option<(&mut ModelParams, f64)>,
) -> Result<(f64, usize)> {
    let input = &seq[..seq.len() - 1];
    let (logits, acts) = model.forward_train(input)?;
    let n = input.len() - skip;
    let mut loss = 0.0;
    let mut dout = grads.as_ref().map(|_| Matrix::zeros(logits.rows(), logits.cols()));
    for i in skip..input.len() {
        let target = seq[i + 1] as usize;
        loss += cross_entropy(logits.row(i), target)?;
        if let Some(d) = dout.as_mut() {
            d.row_mut(i).copy_from_slice(&cross_entropy_grad(logits.row(i), target));
        }
    }
    if let (Some((g, scale)), Some(mut d)) = (grads, dout) {
        let s = scale / n as f64;
        d.data_mut().iter_mut().for_each(|v| *v *= s);
        model.backward(&acts, &d, g);
    }
    Ok((loss / n as f64, n))
}

fn classifier_loss(
    model: &Transformer,
    tokens: &[TokenId],
    label: usize,
    grads: Option<(&mut ModelParams, f64)>,
) -> Result<(f64, bool)> {
    let (logits, acts) = model.forward_train(tokens)?;
    let loss = cross_entropy(logits.row(0), label)?;
    let correct = argmax(logits.row(0)) == label;
    if let Some((g, scale)) = grads {
        let d: Vec<f64> = cross_entropy_grad(logits.row(0), label).iter().map(|v| v * scale).collect();
        model.backward(&acts, &Matrix::from_vec(1, d.len(), d)?, g);
    }
    Ok((loss, correct))
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Per-example training signal: loss and, for classifiers, whether the
/// prediction was correct.
type ExampleResult = Result<(f64, Option<bool>)>;

/// Shared optimizer loop. `example_loss(model, index, rng, grads)` returns
/// the example's loss and, when `grads` is given, adds its gradient scaled
/// by the supplied factor. `on_epoch` receives the epoch-mean train loss
/// and train accuracy (percent, if reported).
fn optimize<F>(
    model: &mut Transformer,
    num_examples: usize,
    config: &TrainConfig,
    mut example_loss: F,
    mut on_epoch: impl FnMut(&Transformer, usize, f64, Option<f64>) -> Result<()>,
) -> Result<()>
where
    F: FnMut(&Transformer, usize, &mut ChaCha8Rng, Option<(&mut ModelParams, f64)>) -> ExampleResult,
{
    config.validate()?;
    if num_examples == 0 {
        return Err(Error::Validation("empty training corpus".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let batch = config.effective_batch().min(num_examples);
    let steps_per_epoch = num_examples.div_ceil(batch);
    let total_steps = (steps_per_epoch * config.epochs) as f64;
    let mut opt = OptimizerState::new(model.params.num_params(), config.learning_rate, config.weight_decay);
    let decay = model.params.decay_mask();
    let mut grads = ModelParams::zeros(&model.config);
    let mut order: Vec<usize> = (0..num_examples).collect();
    let mut step = 0usize;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let (mut correct, mut judged) = (0usize, 0usize);
        for chunk in order.chunks(batch) {
            grads.fill_zero();
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let (loss, ok) = example_loss(model, i, &mut rng, Some((&mut grads, scale)))?;
                if let Some(ok) = ok {
                    judged += 1;
                    correct += ok as usize;
                }
                if !loss.is_finite() {
                    return Err(Error::Training {
                        epoch,
                        step,
                        message: format!("non-finite loss {loss}"),
                    });
                }
                epoch_loss += loss;
            }
            if config.max_grad_norm > 0.0 {
                let norm = grads
                    .slices()
                    .iter()
                    .flat_map(|s| s.iter())
                    .map(|g| g * g)
                    .sum::<f64>()
                    .sqrt();
                if norm > config.max_grad_norm {
                    let f = config.max_grad_norm / norm;
                    grads.slices_mut().into_iter().for_each(|s| s.iter_mut().for_each(|g| *g *= f));
                }
            }
            opt.learning_rate = config.learning_rate * (1.0 - step as f64 / total_steps);
            opt.begin_step();
            let mut offset = 0;
            for ((p, g), &d) in model.params.slices_mut().into_iter().zip(grads.slices()).zip(&decay) {
                opt.update_segment(offset, p, g, d)?;
                offset += p.len();
            }
            if !model.params.is_finite() {
                return Err(Error::Training {
                    epoch,
                    step,
                    message: "parameters became non-finite".into(),
                });
            }
            step += 1;
        }
        let accuracy = (judged > 0).then(|| 100.0 * correct as f64 / judged as f64);
        on_epoch(model, epoch, epoch_loss / num_examples as f64, accuracy)?;
    }
    Ok(())
}

fn check_corpus(corpus: &LabeledCorpus) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::Validation(format!("{:?} split is empty", corpus.split)));
    }
    Ok(())
}

/// Validation loss and perplexity of an LM, pooled over tokens (EOS included).
pub fn lm_validation(model: &Transformer, corpus: &LabeledCorpus) -> Result<(f64, f64)> {
    let (mut total, mut count) = (0.0, 0usize);
    for ex in &corpus.examples {
        let (loss, n) = lm_sequence_loss(model, &with_eos(&ex.tokens), 0, None)?;
        total += loss * n as f64;
        count += n;
    }
    let mean = total / count.max(1) as f64;
    Ok((mean, mean.exp()))
}

/// Mean loss and full-length accuracy (percent) of a classifier.
pub fn classifier_validation(model: &Transformer, corpus: &LabeledCorpus) -> Result<(f64, f64)> {
    let (mut total, mut correct) = (0.0, 0usize);
    for ex in &corpus.examples {
        let (loss, ok) = classifier_loss(model, &ex.tokens, ex.label, None)?;
        total += loss;
        correct += ok as usize;
    }
    let n = corpus.len().max(1) as f64;
    Ok((total / n, 100.0 * correct as f64 / n))
}

fn lm_model(vocab_size: usize, config: &TrainConfig) -> Result<Transformer> {
    Transformer::new(ModelConfig::lm(config.backbone, vocab_size)?, config.seed)
}

/// Next-token LM on `train` (text followed by EOS).
pub fn train_lm(
    train: &LabeledCorpus,
    validation: &LabeledCorpus,
    vocab_size: usize,
    config: &TrainConfig,
) -> Result<TrainedModel> {
    check_corpus(train)?;
    let seqs: Vec<Vec<TokenId>> = train.examples.iter().map(|e| with_eos(&e.tokens)).collect();
    let mut model = lm_model(vocab_size, config)?;
    let mut metrics = Vec::new();
    optimize(
        &mut model,
        seqs.len(),
        config,
        |m, i, _, g| Ok((lm_sequence_loss(m, &seqs[i], 0, g)?.0, None)),
        |m, epoch, loss, _| {
            metrics.push(MetricRow {
                epoch,
                split: "train".into(),
                loss,
                metric: loss.exp(),
            });
            if !validation.is_empty() {
                let (vl, ppl) = lm_validation(m, validation)?;
                metrics.push(MetricRow {
                    epoch,
                    split: "validation".into(),
                    loss: vl,
                    metric: ppl,
                });
            }
            Ok(())
        },
    )?;
    Ok(TrainedModel {
        model,
        kind: ModelKind::Lm,
        metrics,
    })
}

/// Classifier trained on random non-empty prefixes of each example (a new
/// prefix length is drawn every time the example is visited).
pub fn train_discriminator(
    train: &LabeledCorpus,
    validation: &LabeledCorpus,
    vocab_size: usize,
    config: &TrainConfig,
    mask_mode: MaskMode,
) -> Result<TrainedModel> {
    let kind = match mask_mode {
        MaskMode::Bidirectional => ModelKind::DiscBi,
        MaskMode::Causal => ModelKind::DiscUni,
    };
    train_classifier(train, validation, vocab_size, config, mask_mode, true, kind)
}

fn train_classifier(
    train: &LabeledCorpus,
    validation: &LabeledCorpus,
    vocab_size: usize,
    config: &TrainConfig,
    mask_mode: MaskMode,
    prefixes: bool,
    kind: ModelKind,
) -> Result<TrainedModel> {
    check_corpus(train)?;
    train.validate_train()?;
    let cfg = ModelConfig::classifier(config.backbone, vocab_size, train.num_classes, mask_mode)?;
    let mut model = Transformer::new(cfg, config.seed)?;
    let mut metrics = Vec::new();
    let examples = &train.examples;
    optimize(
        &mut model,
        examples.len(),
        config,
        |m, i, rng, g| {
            let ex: &LabeledExample = &examples[i];
            let tokens = if prefixes {
                sample_training_prefix(ex, rng).0
            } else {
                ex.tokens.clone()
            };
            let (loss, ok) = classifier_loss(m, &tokens, ex.label, g)?;
            Ok((loss, Some(ok)))
        },
        |m, epoch, loss, accuracy| {
            metrics.push(MetricRow {
                epoch,
                split: "train".into(),
                loss,
                metric: accuracy.unwrap_or(0.0),
            });
            if !validation.is_empty() {
                let (vl, acc) = classifier_validation(m, validation)?;
                metrics.push(MetricRow {
                    epoch,
                    split: "validation".into(),
                    loss: vl,
                    metric: acc,
                });
            }
            Ok(())
        },
    )?;
    Ok(TrainedModel { model, kind, metrics })
}

/// Per-class token-mean losses of one example under a class-conditional LM
/// (the prediction of the control token itself is not scored), the joint
/// loss, and its gradient if requested.
fn cclm_example_loss(
    model: &Transformer,
    num_classes: usize,
    ex: &LabeledExample,
    lambda: f64,
    grads: Option<(&mut ModelParams, f64)>,
) -> Result<(f64, Vec<f64>)> {
    let base_vocab = model.config.vocab_size - num_classes;
    let seqs: Vec<Vec<TokenId>> = (0..num_classes)
        .map(|c| {
            let mut s = vec![BOS, (base_vocab + c) as TokenId];
            s.extend_from_slice(&ex.tokens[1..]);
            s.push(EOS);
            s
        })
        .collect();
    let losses: Vec<f64> = seqs
        .iter()
        .map(|s| lm_sequence_loss(model, s, 1, None).map(|r| r.0))
        .collect::<Result<_>>()?;
    let total = joint_loss(&losses, ex.label, lambda)?;
    if let Some((g, scale)) = grads {
        let dl = joint_loss_grad(&losses, ex.label, lambda)?;
        for (s, w) in seqs.iter().zip(dl) {
            if w != 0.0 {
                lm_sequence_loss(model, s, 1, Some((&mut *g, scale * w)))?;
            }
        }
    }
    Ok((total, losses))
}

/// Mean joint loss and Bayes-rule accuracy (percent) at full length.
/// Every class scores the same number of tokens, so ranking by mean loss
/// equals ranking by summed log-likelihood.
pub fn cclm_validation(
    model: &Transformer,
    num_classes: usize,
    corpus: &LabeledCorpus,
    lambda: f64,
) -> Result<(f64, f64)> {
    let (mut total, mut correct) = (0.0, 0usize);
    for ex in &corpus.examples {
        let (loss, losses) = cclm_example_loss(model, num_classes, ex, lambda, None)?;
        total += loss;
        let neg: Vec<f64> = losses.iter().map(|l| -l).collect();
        correct += (argmax(&neg) == ex.label) as usize;
    }
    let n = corpus.len().max(1) as f64;
    Ok((total / n, 100.0 * correct as f64 / n))
}

/// LM over the vocabulary plus one control token per class, trained with
/// [`joint_loss`] on `[BOS, control(label), text, EOS]`.
pub fn train_cclm(
    train: &LabeledCorpus,
    validation: &LabeledCorpus,
    vocab_size: usize,
    config: &TrainConfig,
) -> Result<TrainedModel> {
    check_corpus(train)?;
    train.validate_train()?;
    if config.backbone.max_positions < L_MAX + 1 {
        return Err(Error::Configuration(format!(
            "class-conditional LM needs max_positions >= {} for the control token",
            L_MAX + 1
        )));
    }
    let classes = train.num_classes;
    let mut model = lm_model(vocab_size + classes, config)?;
    let mut metrics = Vec::new();
    let examples = &train.examples;
    let lambda = config.lambda;
    optimize(
        &mut model,
        examples.len(),
        config,
        |m, i, _, g| {
            let ex = &examples[i];
            let (loss, losses) = cclm_example_loss(m, classes, ex, lambda, g)?;
            let neg: Vec<f64> = losses.iter().map(|l| -l).collect();
            Ok((loss, Some(argmax(&neg) == ex.label)))
        },
        |m, epoch, loss, accuracy| {
            metrics.push(MetricRow {
                epoch,
                split: "train".into(),
                loss,
                metric: accuracy.unwrap_or(0.0),
            });
            if !validation.is_empty() {
                let (vl, acc) = cclm_validation(m, classes, validation, lambda)?;
                metrics.push(MetricRow {
                    epoch,
                    split: "validation".into(),
                    loss: vl,
                    metric: acc,
                });
            }
            Ok(())
        },
    )?;
    Ok(TrainedModel {
        model,
        kind: ModelKind::Cclm,
        metrics,
    })
}

/// LM judge for generated text, trained on the oracle split only.
pub fn train_oracle_lm(
    oracle_train: &LabeledCorpus,
    validation: &LabeledCorpus,
    vocab_size: usize,
    config: &TrainConfig,
) -> Result<TrainedModel> {
    let mut t = train_lm(oracle_train, validation, vocab_size, config)?;
    t.kind = ModelKind::OracleLm;
    Ok(t)
}

/// Bidirectional classifier judge, trained on complete oracle-split texts.
pub fn train_oracle_discriminator(
    oracle_train: &LabeledCorpus,
    validation: &LabeledCorpus,
    vocab_size: usize,
    config: &TrainConfig,
) -> Result<TrainedModel> {
    train_classifier(
        oracle_train,
        validation,
        vocab_size,
        config,
        MaskMode::Bidirectional,
        false,
        ModelKind::OracleDisc,
    )
}

/// Bayes classifier view of a trained class-conditional LM.
pub fn gedi_from(model: Transformer, num_classes: usize) -> Result<Gedi<CcLm>> {
    Ok(Gedi::new(CcLm::new(model, num_classes)?))
}
