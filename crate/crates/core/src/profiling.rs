//! Exact cost accounting, per-step cost curves and curve fits.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{TokenId, BOS};
use crate::discriminators::ValueSource;
use crate::error::{Error, Result};
use crate::mcts::{generate_batch, Generation, GenerationJob, PriorSource, SearchParams};

pub const FIG1_FILE: &str = "fig1_accuracy_vs_length.csv";
pub const FIG2_FILE: &str = "fig2_step_cost.csv";
pub const TABLE1_FILE: &str = "table1_quality.csv";

/// Monotone work counters. Every model invocation (full or incremental)
/// adds one forward pass; every query-key dot product adds one attention
/// score.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostCounters {
    pub forward_passes: u64,
    pub attention_scores: u64,
    pub tokens_scored: u64,
}

impl CostCounters {
    pub fn add(&mut self, other: &CostCounters) {
        self.forward_passes += other.forward_passes;
        self.attention_scores += other.attention_scores;
        self.tokens_scored += other.tokens_scored;
    }

    /// `self - earlier`; panics in debug builds if counters went backwards.
    pub fn since(&self, earlier: &CostCounters) -> CostCounters {
        debug_assert!(self.forward_passes >= earlier.forward_passes);
        CostCounters {
            forward_passes: self.forward_passes - earlier.forward_passes,
            attention_scores: self.attention_scores - earlier.attention_scores,
            tokens_scored: self.tokens_scored - earlier.tokens_scored,
        }
    }
}

/// Discriminator cost of one decoding step, averaged over every profiled
/// sequence that reached the step. The LM side is identical across
/// families and is not included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepCostRecord {
    /// 1-based index of the generated token.
    pub step: usize,
    pub family: String,
    pub forward_passes: f64,
    pub attention_scores: f64,
    pub wall_seconds: f64,
    pub c_puct: f64,
    pub iterations: usize,
}

/// Runs `num_batches` batches of `batch_size` searches from a bare BOS
/// prompt (target classes alternate) and averages the per-step costs.
pub fn profile_generation<L, V>(
    lm: &L,
    source: &V,
    family: &str,
    params: &SearchParams,
    num_batches: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<StepCostRecord>>
where
    L: PriorSource + Sync,
    V: ValueSource + Sync,
{
    let generations = run_batches(lm, source, params, num_batches, batch_size, seed)?;
    Ok(average_steps(&generations, family, params))
}

fn run_batches<L, V>(
    lm: &L,
    source: &V,
    params: &SearchParams,
    num_batches: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Generation>>
where
    L: PriorSource + Sync,
    V: ValueSource + Sync,
{
    let classes = source.num_classes().max(1);
    let mut all = Vec::with_capacity(num_batches * batch_size);
    for b in 0..num_batches {
        let jobs: Vec<GenerationJob> = (0..batch_size)
            .map(|i| {
                let k = b * batch_size + i;
                GenerationJob {
                    prompt: vec![BOS as TokenId],
                    target_class: k % classes,
                    seed: seed.wrapping_add(k as u64),
                }
            })
            .collect();
        all.extend(generate_batch(&jobs, lm, source, params)?);
    }
    Ok(all)
}

fn average_steps(generations: &[Generation], family: &str, params: &SearchParams) -> Vec<StepCostRecord> {
    let longest = generations.iter().map(|g| g.steps.len()).max().unwrap_or(0);
    (0..longest)
        .map(|i| {
            let reached: Vec<_> = generations.iter().filter_map(|g| g.steps.get(i)).collect();
            let n = reached.len() as f64;
            let mean = |f: &dyn Fn(&crate::mcts::StepStats) -> f64| reached.iter().map(|s| f(s)).sum::<f64>() / n;
            StepCostRecord {
                step: i + 1,
                family: family.to_string(),
                forward_passes: mean(&|s| s.disc_cost.forward_passes as f64),
                attention_scores: mean(&|s| s.disc_cost.attention_scores as f64),
                wall_seconds: mean(&|s| s.wall_seconds),
                c_puct: params.c_puct,
                iterations: params.iterations_per_token,
            }
        })
        .collect()
}

/// Per-sequence discriminator cost of one family at one `c_puct`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccountingRow {
    pub c_puct: f64,
    pub family: String,
    pub sequences: usize,
    /// Mean discriminator forward passes per generated sequence.
    pub forward_passes: f64,
    pub attention_scores: f64,
    /// Mean number of distinct children evaluated per node that had any
    /// child evaluated.
    pub width: f64,
    /// Mean generated length in tokens.
    pub mean_length: f64,
}

/// Sweeps `c_puct` for each `(family, source)` pair with identical seeds.
pub fn forward_pass_accounting<L, V>(
    lm: &L,
    families: &[(&str, &V)],
    base: &SearchParams,
    c_puct_sweep: &[f64],
    num_sequences: usize,
    seed: u64,
) -> Result<Vec<AccountingRow>>
where
    L: PriorSource + Sync,
    V: ValueSource + Sync,
{
    if num_sequences == 0 {
        return Err(Error::Parameter("accounting needs at least one sequence".into()));
    }
    let mut rows = Vec::new();
    for &c_puct in c_puct_sweep {
        let params = SearchParams { c_puct, ..base.clone() };
        for (family, source) in families {
            let gens = run_batches(lm, *source, &params, 1, num_sequences, seed)?;
            rows.push(accounting_row(&gens, family, c_puct));
        }
    }
    Ok(rows)
}

fn accounting_row(gens: &[Generation], family: &str, c_puct: f64) -> AccountingRow {
    let n = gens.len() as f64;
    let (mut fp, mut att, mut evaluated, mut parents, mut len) = (0u64, 0u64, 0u64, 0u64, 0usize);
    for g in gens {
        len += g.tokens.len() - 1;
        for s in &g.steps {
            fp += s.disc_cost.forward_passes;
            att += s.disc_cost.attention_scores;
            evaluated += s.evaluated;
            parents += s.parents_explored;
        }
    }
    AccountingRow {
        c_puct,
        family: family.to_string(),
        sequences: gens.len(),
        forward_passes: fp as f64 / n,
        attention_scores: att as f64 / n,
        width: if parents == 0 { 0.0 } else { evaluated as f64 / parents as f64 },
        mean_length: len as f64 / n,
    }
}

pub const COST_CSV_HEADER: [&str; 7] = [
    "step",
    "family",
    "forward_passes",
    "attention_scores",
    "wall_seconds",
    "c_puct",
    "iterations",
];

pub fn emit_cost_csv(records: &[StepCostRecord], path: &Path) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Validation("no cost records to write".into()));
    }
    crate::evaluation::create_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(COST_CSV_HEADER)?;
    for r in records {
        w.write_record([
            r.step.to_string(),
            r.family.clone(),
            r.forward_passes.to_string(),
            r.attention_scores.to_string(),
            r.wall_seconds.to_string(),
            r.c_puct.to_string(),
            r.iterations.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_cost_csv(path: &Path) -> Result<Vec<StepCostRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != COST_CSV_HEADER {
        return Err(Error::Parse {
            line: 1,
            message: format!("unexpected cost header {header:?}"),
        });
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Least-squares polynomial fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyFit {
    /// Constant term first.
    pub coefficients: Vec<f64>,
    pub r_squared: f64,
}

/// Fits `y ≈ Σ c_k x^k` for `k ≤ degree` through the normal equations.
pub fn fit_polynomial(xs: &[f64], ys: &[f64], degree: usize) -> Result<PolyFit> {
    let m = degree + 1;
    if xs.len() != ys.len() || xs.len() < m {
        return Err(Error::Validation(format!(
            "degree-{degree} fit needs at least {m} paired points, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    // augmented normal-equation matrix
    let mut a = vec![vec![0.0; m + 1]; m];
    for (&x, &y) in xs.iter().zip(ys) {
        let powers: Vec<f64> = (0..m).map(|k| x.powi(k as i32)).collect();
        for i in 0..m {
            for j in 0..m {
                a[i][j] += powers[i] * powers[j];
            }
            a[i][m] += powers[i] * y;
        }
    }
    for col in 0..m {
        let pivot = (col..m)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        if a[pivot][col].abs() < 1e-300 {
            return Err(Error::Validation("degenerate fit: x values are not distinct enough".into()));
        }
        a.swap(col, pivot);
        for row in 0..m {
            if row != col {
                let f = a[row][col] / a[col][col];
                for k in col..=m {
                    a[row][k] -= f * a[col][k];
                }
            }
        }
    }
    let coefficients: Vec<f64> = (0..m).map(|i| a[i][m] / a[i][i]).collect();
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let ss_tot: f64 = ys.iter().map(|y| (y - mean).powi(2)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(&x, &y)| {
            let fit: f64 = coefficients.iter().enumerate().map(|(k, c)| c * x.powi(k as i32)).sum();
            (y - fit).powi(2)
        })
        .sum();
    let r_squared = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(PolyFit {
        coefficients,
        r_squared,
    })
}
