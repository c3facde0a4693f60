//! Quality metrics for classifiers and generated samples.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::{TokenId, BOS, EOS};
use crate::discriminators::{ClassPosterior, Discriminator, ValueSource};
use crate::error::{Error, Result};
use crate::model::{HeadKind, Transformer};
use crate::numerics::log_softmax;
use crate::profiling::CostCounters;

/// Anything that maps a token sequence (BOS first) to a class posterior.
pub trait SequenceClassifier: Sync {
    fn num_classes(&self) -> usize;
    fn vocab_size(&self) -> usize;
    fn classify(&self, tokens: &[TokenId], counters: &mut CostCounters) -> Result<ClassPosterior>;

    /// Posteriors of `tokens[..end]` for each of the ascending `ends`.
    fn classify_prefixes(
        &self,
        tokens: &[TokenId],
        ends: &[usize],
        counters: &mut CostCounters,
    ) -> Result<Vec<ClassPosterior>> {
        ends.iter().map(|&e| self.classify(&tokens[..e], counters)).collect()
    }
}

impl SequenceClassifier for Discriminator {
    fn num_classes(&self) -> usize {
        ValueSource::num_classes(self)
    }

    fn vocab_size(&self) -> usize {
        ValueSource::vocab_size(self)
    }

    fn classify(&self, tokens: &[TokenId], counters: &mut CostCounters) -> Result<ClassPosterior> {
        self.posterior(tokens, counters)
    }

    fn classify_prefixes(
        &self,
        tokens: &[TokenId],
        ends: &[usize],
        counters: &mut CostCounters,
    ) -> Result<Vec<ClassPosterior>> {
        match self {
            Discriminator::Bidirectional(_) => ends.iter().map(|&e| self.classify(&tokens[..e], counters)).collect(),
            _ => {
                let Some(&last) = ends.last() else {
                    return Ok(Vec::new());
                };
                let all = self.prefix_posteriors(&tokens[..last], counters)?;
                Ok(ends.iter().map(|&e| all[e - 1].clone()).collect())
            }
        }
    }
}

/// Anything that assigns next-token log-probabilities to a sequence.
pub trait SequenceScorer: Sync {
    fn vocab_size(&self) -> usize;
    /// `log p(seq[i + 1] | seq[..=i])` for every `i`.
    fn token_log_probs(&self, seq: &[TokenId], counters: &mut CostCounters) -> Result<Vec<f64>>;
}

impl SequenceScorer for Transformer {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn token_log_probs(&self, seq: &[TokenId], counters: &mut CostCounters) -> Result<Vec<f64>> {
        if self.config.head_kind != HeadKind::Lm {
            return Err(Error::Configuration("perplexity needs a language-model head".into()));
        }
        if seq.len() < 2 {
            return Ok(Vec::new());
        }
        let logits = self.forward_full(&seq[..seq.len() - 1], counters)?;
        Ok((0..seq.len() - 1)
            .map(|i| log_softmax(logits.row(i))[seq[i + 1] as usize])
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub length: usize,
    pub accuracy: f64,
}

/// Accuracy (percent) on `corpus` with every example truncated to its first
/// `length` text tokens. Shorter examples are scored at full length.
pub fn accuracy_vs_length<C: SequenceClassifier>(
    classifier: &C,
    corpus: &crate::data::LabeledCorpus,
    lengths: &[usize],
    counters: &mut CostCounters,
) -> Result<Vec<CurvePoint>> {
    if corpus.is_empty() {
        return Err(Error::Validation("accuracy curve needs a non-empty test set".into()));
    }
    if lengths.is_empty() || lengths[0] == 0 || lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Validation(format!(
            "probe lengths must be positive and strictly ascending, got {lengths:?}"
        )));
    }
    let per_example: Vec<(Vec<bool>, CostCounters)> = corpus
        .examples
        .par_iter()
        .map(|ex| {
            let mut local = CostCounters::default();
            let text_len = ex.text_len();
            let mut ends: Vec<usize> = lengths.iter().map(|&l| l.min(text_len) + 1).collect();
            ends.dedup();
            let posts = classifier.classify_prefixes(&ex.tokens, &ends, &mut local)?;
            let by_end: HashMap<usize, bool> = ends
                .iter()
                .zip(&posts)
                .map(|(&e, p)| (e, p.argmax() == ex.label))
                .collect();
            let hits = lengths.iter().map(|&l| by_end[&(l.min(text_len) + 1)]).collect();
            Ok((hits, local))
        })
        .collect::<Result<_>>()?;
    let n = corpus.len() as f64;
    let mut correct = vec![0usize; lengths.len()];
    for (hits, local) in &per_example {
        counters.add(local);
        for (c, h) in correct.iter_mut().zip(hits) {
            *c += *h as usize;
        }
    }
    Ok(lengths
        .iter()
        .zip(correct)
        .map(|(&length, c)| CurvePoint {
            length,
            accuracy: 100.0 * c as f64 / n,
        })
        .collect())
}

/// A generated text (BOS first, no EOS) and the class it was steered to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub tokens: Vec<TokenId>,
    pub target_class: usize,
}

impl Sample {
    /// Drops a trailing EOS so the sample matches the training text format.
    pub fn from_generation(mut tokens: Vec<TokenId>, target_class: usize) -> Self {
        if tokens.last() == Some(&EOS) {
            tokens.pop();
        }
        Self { tokens, target_class }
    }

    pub fn text(&self) -> &[TokenId] {
        &self.tokens[1..]
    }
}

fn check_samples(samples: &[Sample], vocab_size: usize, what: &str) -> Result<()> {
    for (i, s) in samples.iter().enumerate() {
        if s.tokens.first() != Some(&BOS) {
            return Err(Error::Validation(format!("sample {i} does not start with BOS")));
        }
        if let Some(&t) = s.tokens.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(Error::Configuration(format!(
                "sample {i} has token {t} outside the {what} vocabulary of {vocab_size}"
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleJudgement {
    /// Percent of samples whose oracle argmax is the target class.
    pub accuracy: f64,
    /// Per target class; `None` for classes without samples.
    pub per_class: Vec<Option<f64>>,
    pub correct: Vec<bool>,
}

pub fn oracle_accuracy<C: SequenceClassifier>(
    samples: &[Sample],
    oracle: &C,
    counters: &mut CostCounters,
) -> Result<OracleJudgement> {
    if samples.is_empty() {
        return Err(Error::Validation("no samples to judge".into()));
    }
    check_samples(samples, oracle.vocab_size(), "oracle")?;
    let k = oracle.num_classes();
    if let Some(s) = samples.iter().find(|s| s.target_class >= k) {
        return Err(Error::Configuration(format!(
            "target class {} but the oracle has {k} classes",
            s.target_class
        )));
    }
    let judged: Vec<(bool, CostCounters)> = samples
        .par_iter()
        .map(|s| {
            let mut local = CostCounters::default();
            let p = oracle.classify(&s.tokens, &mut local)?;
            Ok((p.argmax() == s.target_class, local))
        })
        .collect::<Result<_>>()?;
    let mut hits = vec![0usize; k];
    let mut totals = vec![0usize; k];
    let mut correct = Vec::with_capacity(samples.len());
    for (s, (ok, local)) in samples.iter().zip(judged) {
        counters.add(&local);
        totals[s.target_class] += 1;
        hits[s.target_class] += ok as usize;
        correct.push(ok);
    }
    let n_ok = correct.iter().filter(|&&c| c).count();
    Ok(OracleJudgement {
        accuracy: 100.0 * n_ok as f64 / samples.len() as f64,
        per_class: hits
            .iter()
            .zip(&totals)
            .map(|(&h, &t)| (t > 0).then(|| 100.0 * h as f64 / t as f64))
            .collect(),
        correct,
    })
}

fn ngram_counts(tokens: &[TokenId], n: usize) -> HashMap<&[TokenId], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

/// BLEU of `hypothesis` against `references`: uniform weights over orders
/// `1..=max_n`, clipped counts, brevity penalty from the closest reference
/// length (shorter wins ties), and no smoothing.
pub fn bleu(hypothesis: &[TokenId], references: &[&[TokenId]], max_n: usize) -> f64 {
    let c = hypothesis.len();
    if c == 0 || references.is_empty() || max_n == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let hyp = ngram_counts(hypothesis, n);
        let total: usize = hyp.values().sum();
        if total == 0 {
            return 0.0;
        }
        let mut max_ref: HashMap<&[TokenId], usize> = HashMap::new();
        for r in references {
            for (g, k) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(k);
            }
        }
        let clipped: usize = hyp
            .iter()
            .map(|(g, &k)| k.min(max_ref.get(g).copied().unwrap_or(0)))
            .sum();
        if clipped == 0 {
            return 0.0;
        }
        log_sum += (clipped as f64 / total as f64).ln();
    }
    let r = references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&len| (len.abs_diff(c), len))
        .unwrap();
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * (log_sum / max_n as f64).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfBleu {
    pub per_sample: Vec<f64>,
    pub mean: f64,
}

/// Mean BLEU of each sample against all the others.
pub fn self_bleu(samples: &[&[TokenId]], max_n: usize) -> Result<SelfBleu> {
    if samples.len() < 2 {
        return Err(Error::Validation(format!(
            "self-BLEU needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    let per_sample: Vec<f64> = (0..samples.len())
        .into_par_iter()
        .map(|i| {
            let refs: Vec<&[TokenId]> = samples
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, s)| *s)
                .collect();
            bleu(samples[i], &refs, max_n)
        })
        .collect();
    let mean = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
    Ok(SelfBleu { per_sample, mean })
}

/// Summed negative log-likelihood and number of predicted tokens (text plus
/// EOS) over `samples`.
pub fn nll_sum<S: SequenceScorer>(
    samples: &[Sample],
    lm: &S,
    counters: &mut CostCounters,
) -> Result<(f64, usize)> {
    check_samples(samples, lm.vocab_size(), "oracle LM")?;
    let parts: Vec<(f64, usize, CostCounters)> = samples
        .par_iter()
        .map(|s| {
            let mut local = CostCounters::default();
            let mut seq = s.tokens.clone();
            seq.push(EOS);
            let lp = lm.token_log_probs(&seq, &mut local)?;
            Ok((-lp.iter().sum::<f64>(), lp.len(), local))
        })
        .collect::<Result<_>>()?;
    let (mut sum, mut count) = (0.0, 0usize);
    for (s, n, local) in parts {
        counters.add(&local);
        sum += s;
        count += n;
    }
    Ok((sum, count))
}

/// `exp` of the token-pooled mean negative log-likelihood.
pub fn oracle_perplexity<S: SequenceScorer>(
    samples: &[Sample],
    lm: &S,
    counters: &mut CostCounters,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Validation("perplexity of an empty sample set".into()));
    }
    let (sum, count) = nll_sum(samples, lm, counters)?;
    Ok((sum / count as f64).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchTest {
    pub t: f64,
    pub df: f64,
    /// Two-sided.
    pub p: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
    (m, v)
}

pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<WelchTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Validation(format!(
            "t-test needs at least 2 values per group, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    let se2 = sa + sb;
    if se2 <= 0.0 {
        return Err(Error::UndefinedTest("both groups have zero variance".into()));
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (a.len() as f64 - 1.0) + sb * sb / (b.len() as f64 - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::UndefinedTest(e.to_string()))?;
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(WelchTest { t, df, p })
}

/// One row of the quality table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub name: String,
    pub sample_count: usize,
    /// Oracle accuracy in percent.
    pub accuracy: f64,
    pub per_class_accuracy: Vec<Option<f64>>,
    pub self_bleu_5: f64,
    pub oracle_perplexity: f64,
    pub settings: serde_json::Value,
    /// 1 when the oracle agreed with the target class, else 0.
    pub scores: Vec<f64>,
}

pub const SELF_BLEU_ORDER: usize = 5;

pub fn evaluate_samples<C: SequenceClassifier, S: SequenceScorer>(
    name: &str,
    samples: &[Sample],
    oracle: &C,
    oracle_lm: &S,
    settings: serde_json::Value,
) -> Result<EvalReport> {
    let mut counters = CostCounters::default();
    let judged = oracle_accuracy(samples, oracle, &mut counters)?;
    let texts: Vec<&[TokenId]> = samples.iter().map(|s| s.text()).collect();
    let sb = self_bleu(&texts, SELF_BLEU_ORDER)?;
    let ppl = oracle_perplexity(samples, oracle_lm, &mut counters)?;
    Ok(EvalReport {
        name: name.to_string(),
        sample_count: samples.len(),
        accuracy: judged.accuracy,
        per_class_accuracy: judged.per_class,
        self_bleu_5: sb.mean,
        oracle_perplexity: ppl,
        settings,
        scores: judged.correct.iter().map(|&c| c as u8 as f64).collect(),
    })
}

pub fn write_report_json(path: &Path, report: &EvalReport) -> Result<()> {
    create_parent(path)?;
    std::fs::write(path, serde_json::to_vec_pretty(report)?)?;
    Ok(())
}

pub const REPORT_CSV_HEADER: [&str; 6] = [
    "name",
    "sample_count",
    "accuracy",
    "per_class_accuracy",
    "self_bleu_5",
    "oracle_perplexity",
];

/// One header line and one row per report; per-class accuracies are joined
/// with `;` (empty for classes without samples).
pub fn write_reports_csv(path: &Path, reports: &[EvalReport]) -> Result<()> {
    create_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(REPORT_CSV_HEADER)?;
    for r in reports {
        let per_class: Vec<String> = r
            .per_class_accuracy
            .iter()
            .map(|a| a.map(|v| format!("{v:.4}")).unwrap_or_default())
            .collect();
        w.write_record([
            r.name.clone(),
            r.sample_count.to_string(),
            format!("{:.4}", r.accuracy),
            per_class.join(";"),
            format!("{:.6}", r.self_bleu_5),
            format!("{:.6}", r.oracle_perplexity),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `family,length,accuracy` for any number of labelled curves.
pub fn write_curves_csv(path: &Path, curves: &[(String, Vec<CurvePoint>)]) -> Result<()> {
    create_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["family", "length", "accuracy"])?;
    for (family, curve) in curves {
        for p in curve {
            w.write_record([family.clone(), p.length.to_string(), format!("{:.4}", p.accuracy)])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn create_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    Ok(())
}
