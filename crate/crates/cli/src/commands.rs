use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use coopgen_core::data::synth::{self, Generator};
use coopgen_core::data::{Dataset, Vocabulary, BOS};
use coopgen_core::discriminators::{Discriminator, Family, NullGuide};
use coopgen_core::evaluation::{
    accuracy_vs_length, evaluate_samples, welch_t_test, write_curves_csv, write_report_json, write_reports_csv,
    EvalReport, Sample,
};
use coopgen_core::mcts::{generate_batch, GenerationJob, SearchParams, ValueKind};
use coopgen_core::model::checkpoint::{load_checkpoint, save_checkpoint, ModelMeta};
use coopgen_core::model::{MaskMode, Transformer};
use coopgen_core::profiling::{
    emit_cost_csv, fit_polynomial, forward_pass_accounting, profile_generation, AccountingRow, CostCounters,
    StepCostRecord, FIG1_FILE, FIG2_FILE, TABLE1_FILE,
};
use coopgen_core::training::{self, write_metrics_csv, ModelKind, TrainedModel};
use coopgen_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::{BenchArgs, EvaluateArgs, Failure, GenerateArgs, MakeDataArgs, TrainArgs};

type CmdResult = std::result::Result<(), Failure>;

pub fn make_data(cfg: &mut RunConfig, args: MakeDataArgs) -> CmdResult {
    if let Some(g) = args.generator {
        cfg.data.generator = g;
    }
    if let Some(dir) = args.dir {
        cfg.data.dir = Some(dir);
    }
    let generator: Generator = cfg
        .data
        .generator
        .parse()
        .map_err(|e: Error| Failure::Usage(e.to_string()))?;
    let dir = cfg.data_dir();
    let meta = synth::write_dataset(&dir, generator, cfg.seed, cfg.data.sizes())?;
    eprintln!(
        "wrote {} ({} classes, seed {}) to {}",
        meta.name,
        meta.num_classes,
        cfg.seed,
        dir.display()
    );
    Ok(())
}

fn checkpoint_path(cfg: &RunConfig, kind: ModelKind) -> PathBuf {
    cfg.models_dir().join(format!("{}.ckpt", kind.name()))
}

fn vocab_string(vocab: &Vocabulary) -> String {
    vocab.chars().iter().collect()
}

pub fn train(cfg: &mut RunConfig, args: TrainArgs) -> CmdResult {
    if let Some(d) = args.data {
        cfg.data.dir = Some(d);
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = args.learning_rate {
        cfg.train.learning_rate = lr;
    }
    if let Some(l) = args.lambda {
        cfg.train.lambda = l;
    }
    cfg.train.seed = cfg.seed;
    let kinds: Vec<ModelKind> = if args.kind == "all" {
        ModelKind::ALL.to_vec()
    } else {
        vec![args.kind.parse().map_err(|e: Error| Failure::Usage(e.to_string()))?]
    };
    let ds = Dataset::load(&cfg.data_dir())?;
    let v = ds.vocab.len();
    for kind in kinds {
        let tc = &cfg.train;
        let trained: TrainedModel = match kind {
            ModelKind::Lm => training::train_lm(&ds.train, &ds.validation, v, tc)?,
            ModelKind::DiscBi => {
                training::train_discriminator(&ds.train, &ds.validation, v, tc, MaskMode::Bidirectional)?
            }
            ModelKind::DiscUni => training::train_discriminator(&ds.train, &ds.validation, v, tc, MaskMode::Causal)?,
            ModelKind::Cclm => training::train_cclm(&ds.train, &ds.validation, v, tc)?,
            ModelKind::OracleLm => training::train_oracle_lm(&ds.oracle_train, &ds.validation, v, tc)?,
            ModelKind::OracleDisc => training::train_oracle_discriminator(&ds.oracle_train, &ds.validation, v, tc)?,
        };
        let meta = ModelMeta {
            kind: kind.name().into(),
            vocab: vocab_string(&ds.vocab),
            num_control_tokens: if kind == ModelKind::Cclm { ds.meta.num_classes } else { 0 },
            class_names: ds.meta.class_names.clone(),
        };
        let path = checkpoint_path(cfg, kind);
        save_checkpoint(&trained.model, &meta, &path)?;
        let metrics = cfg.out_dir().join("metrics").join(format!("{}.csv", kind.name()));
        write_metrics_csv(&metrics, &trained.metrics, kind.metric_name())?;
        if let Some(last) = trained.metrics.last() {
            eprintln!(
                "{}: epoch {} {} loss {:.4} {} {:.3} -> {}",
                kind.name(),
                last.epoch,
                last.split,
                last.loss,
                kind.metric_name(),
                last.metric,
                path.display()
            );
        }
    }
    Ok(())
}

fn load(cfg: &RunConfig, kind: ModelKind) -> Result<(Transformer, ModelMeta)> {
    load_checkpoint(&checkpoint_path(cfg, kind))
}

fn family_kind(family: Family) -> ModelKind {
    match family {
        Family::Bidirectional => ModelKind::DiscBi,
        Family::Unidirectional => ModelKind::DiscUni,
        Family::Generative => ModelKind::Cclm,
    }
}

fn load_discriminator(cfg: &RunConfig, family: Family) -> Result<(Discriminator, ModelMeta)> {
    let (model, meta) = load(cfg, family_kind(family))?;
    let disc = match family {
        Family::Bidirectional => Discriminator::bidirectional(model)?,
        Family::Unidirectional => Discriminator::unidirectional(model)?,
        Family::Generative => Discriminator::generative(model, meta.num_control_tokens)?,
    };
    Ok((disc, meta))
}

fn same_vocab(a: &ModelMeta, b: &ModelMeta) -> Result<()> {
    if a.vocab != b.vocab {
        return Err(Error::Configuration(format!(
            "vocabulary mismatch between {} ({} chars) and {} ({} chars)",
            a.kind,
            a.vocab.chars().count(),
            b.kind,
            b.vocab.chars().count()
        )));
    }
    Ok(())
}

/// First line of every samples file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplesMeta {
    pub family: String,
    pub n: usize,
    pub class: Option<usize>,
    pub seed: u64,
    pub vocab: String,
    pub class_names: Vec<String>,
    pub search: SearchParams,
}

#[derive(Debug, Serialize, Deserialize)]
struct MetaLine {
    meta: SamplesMeta,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRecord {
    pub text: String,
    pub target_class: usize,
    pub family: String,
    pub seed: u64,
}

fn parse_family(name: &str) -> std::result::Result<Option<Family>, Failure> {
    if name == "none" {
        return Ok(None);
    }
    name.parse::<Family>()
        .map(Some)
        .map_err(|e| Failure::Usage(format!("{e} (or none)")))
}

pub fn generate(cfg: &mut RunConfig, args: GenerateArgs) -> CmdResult {
    let family = parse_family(&args.family)?;
    if let Some(i) = args.iterations {
        cfg.search.iterations_per_token = i;
    }
    if let Some(c) = args.c_puct {
        cfg.search.c_puct = c;
    }
    if let Some(t) = args.tau {
        cfg.search.tau = t;
    }
    if family.is_none() {
        cfg.search.value_source = ValueKind::LmLikelihood;
    }
    cfg.search.validate()?;
    let (lm, lm_meta) = load(cfg, ModelKind::Lm)?;
    let vocab = Vocabulary::from_chars(lm_meta.vocab.chars())?;
    let num_classes = lm_meta.class_names.len();
    let records = match family {
        Some(f) => {
            let (disc, meta) = load_discriminator(cfg, f)?;
            same_vocab(&lm_meta, &meta)?;
            run_generation(cfg, &args, &lm, &disc, num_classes, &vocab)?
        }
        None => {
            let guide = NullGuide {
                num_classes,
                vocab_size: lm.config.vocab_size,
            };
            run_generation(cfg, &args, &lm, &guide, num_classes, &vocab)?
        }
    };
    let output = args
        .output
        .clone()
        .unwrap_or_else(|| cfg.out_dir().join("samples").join(format!("{}.jsonl", args.family)));
    let meta = SamplesMeta {
        family: args.family.clone(),
        n: args.n,
        class: args.class,
        seed: cfg.seed,
        vocab: lm_meta.vocab.clone(),
        class_names: lm_meta.class_names.clone(),
        search: cfg.search.clone(),
    };
    write_samples(&output, &meta, &records)?;
    eprintln!("wrote {} samples to {}", records.len(), output.display());
    Ok(())
}

fn run_generation<V>(
    cfg: &RunConfig,
    args: &GenerateArgs,
    lm: &Transformer,
    source: &V,
    num_classes: usize,
    vocab: &Vocabulary,
) -> Result<Vec<SampleRecord>>
where
    V: coopgen_core::discriminators::ValueSource + Sync,
{
    let targets: Vec<usize> = match args.class {
        Some(c) => {
            if c >= num_classes {
                return Err(Error::Parameter(format!("class {c} but the corpus has {num_classes} classes")));
            }
            vec![c; args.n]
        }
        None => (0..args.n * num_classes).map(|i| i % num_classes).collect(),
    };
    let jobs: Vec<GenerationJob> = targets
        .iter()
        .enumerate()
        .map(|(i, &c)| GenerationJob {
            prompt: vec![BOS],
            target_class: c,
            seed: cfg.seed.wrapping_add(i as u64),
        })
        .collect();
    let gens = generate_batch(&jobs, lm, source, &cfg.search)?;
    gens.iter()
        .zip(&jobs)
        .map(|(g, j)| {
            Ok(SampleRecord {
                text: vocab.decode(&g.tokens)?,
                target_class: j.target_class,
                family: args.family.clone(),
                seed: j.seed,
            })
        })
        .collect()
}

fn write_samples(path: &Path, meta: &SamplesMeta, records: &[SampleRecord]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer(&mut w, &MetaLine { meta: meta.clone() })?;
    w.write_all(b"\n")?;
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_samples(path: &Path) -> Result<(SamplesMeta, Vec<SampleRecord>)> {
    let file = fs::File::open(path)
        .map_err(|e| Error::Configuration(format!("cannot open samples {}: {e}", path.display())))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Parse {
            line: 1,
            message: format!("{} is empty", path.display()),
        })??;
    let meta: MetaLine = serde_json::from_str(&first).map_err(|e| Error::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 2,
            message: e.to_string(),
        })?);
    }
    Ok((meta.meta, records))
}

#[derive(Debug, Serialize)]
struct Significance {
    name: String,
    baseline: String,
    t: Option<f64>,
    p: Option<f64>,
    note: Option<String>,
}

#[derive(Debug, Serialize)]
struct EvalSummary {
    reports: Vec<ReportSummary>,
    significance: Vec<Significance>,
}

#[derive(Debug, Serialize)]
struct ReportSummary {
    name: String,
    sample_count: usize,
    accuracy: f64,
    per_class_accuracy: Vec<Option<f64>>,
    self_bleu_5: f64,
    oracle_perplexity: f64,
}

pub fn evaluate(cfg: &RunConfig, args: EvaluateArgs) -> CmdResult {
    let (oracle_model, oracle_meta) = load(cfg, ModelKind::OracleDisc)?;
    let (oracle_lm, lm_meta) = load(cfg, ModelKind::OracleLm)?;
    same_vocab(&oracle_meta, &lm_meta)?;
    let oracle = Discriminator::bidirectional(oracle_model)?;
    let vocab = Vocabulary::from_chars(oracle_meta.vocab.chars())?;
    let eval_dir = cfg.out_dir().join("eval");
    let mut reports: Vec<EvalReport> = Vec::new();
    for path in &args.samples {
        let (meta, records) = read_samples(path)?;
        if meta.vocab != oracle_meta.vocab {
            return Err(Error::Configuration(format!(
                "{} was generated with a different vocabulary than the oracles",
                path.display()
            ))
            .into());
        }
        let samples: Vec<Sample> = records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let tokens = vocab.encode(&r.text).map_err(|e| {
                    Error::Configuration(format!("{} sample {}: {e}; vocabulary mismatch", path.display(), i + 1))
                })?;
                Ok(Sample {
                    tokens,
                    target_class: r.target_class,
                })
            })
            .collect::<Result<_>>()?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("samples").to_string();
        let settings = serde_json::json!({
            "file": path.display().to_string(),
            "family": meta.family,
            "seed": meta.seed,
            "search": meta.search,
        });
        let report = evaluate_samples(&stem, &samples, &oracle, &oracle_lm, settings)?;
        write_report_json(&eval_dir.join(format!("{stem}.json")), &report)?;
        eprintln!(
            "{stem}: accuracy {:.1}% self-BLEU-5 {:.4} oracle perplexity {:.3} over {} samples",
            report.accuracy, report.self_bleu_5, report.oracle_perplexity, report.sample_count
        );
        reports.push(report);
    }
    write_reports_csv(&cfg.plots_dir().join(TABLE1_FILE), &reports)?;

    let baseline = reports
        .iter()
        .find(|r| r.settings["family"] == "none")
        .map(|r| (r.name.clone(), r.scores.clone()));
    let significance = match &baseline {
        Some((base_name, base_scores)) => reports
            .iter()
            .filter(|r| &r.name != base_name)
            .map(|r| match welch_t_test(&r.scores, base_scores) {
                Ok(w) => Significance {
                    name: r.name.clone(),
                    baseline: base_name.clone(),
                    t: Some(w.t),
                    p: Some(w.p),
                    note: None,
                },
                Err(e) => Significance {
                    name: r.name.clone(),
                    baseline: base_name.clone(),
                    t: None,
                    p: None,
                    note: Some(e.to_string()),
                },
            })
            .collect(),
        None => Vec::new(),
    };
    let summary = EvalSummary {
        reports: reports
            .iter()
            .map(|r| ReportSummary {
                name: r.name.clone(),
                sample_count: r.sample_count,
                accuracy: r.accuracy,
                per_class_accuracy: r.per_class_accuracy.clone(),
                self_bleu_5: r.self_bleu_5,
                oracle_perplexity: r.oracle_perplexity,
            })
            .collect(),
        significance,
    };
    fs::create_dir_all(&eval_dir).map_err(Error::from)?;
    fs::write(
        eval_dir.join("summary.json"),
        serde_json::to_vec_pretty(&summary).map_err(Error::from)?,
    )
    .map_err(Error::from)?;

    if args.curves {
        let ds = Dataset::load(&cfg.data_dir())?;
        let mut curves = Vec::new();
        for family in [Family::Bidirectional, Family::Unidirectional, Family::Generative] {
            if !checkpoint_path(cfg, family_kind(family)).exists() {
                continue;
            }
            let (disc, meta) = load_discriminator(cfg, family)?;
            if meta.vocab != vocab_string(&ds.vocab) {
                return Err(Error::Configuration(format!("{} vocabulary differs from the dataset's", meta.kind)).into());
            }
            let curve = accuracy_vs_length(&disc, &ds.test, &cfg.eval.curve_lengths, &mut CostCounters::default())?;
            curves.push((family.short_name().to_string(), curve));
        }
        write_curves_csv(&cfg.plots_dir().join(FIG1_FILE), &curves)?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct CurveFit {
    family: String,
    steps: (usize, usize),
    linear_r_squared: f64,
    quadratic_r_squared: f64,
    quadratic_coefficients: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct BenchSummary {
    fits: Vec<CurveFit>,
    accounting: Vec<AccountingRow>,
}

pub fn bench(cfg: &mut RunConfig, args: BenchArgs) -> CmdResult {
    if let Some(f) = args.families {
        cfg.bench.families = f;
    }
    if let Some(b) = args.batches {
        cfg.bench.num_batches = b;
    }
    if let Some(b) = args.batch_size {
        cfg.bench.batch_size = b;
    }
    if let Some(i) = args.iterations {
        cfg.search.iterations_per_token = i;
    }
    if let Some(s) = args.c_puct_sweep {
        cfg.bench.c_puct_sweep = s;
    }
    if cfg.bench.full_length {
        cfg.search.min_length = cfg.search.max_length;
    }
    cfg.search.value_source = ValueKind::Discriminator;
    let families: Vec<Family> = cfg
        .bench
        .families
        .iter()
        .map(|f| f.parse::<Family>().map_err(|e| Failure::Usage(e.to_string())))
        .collect::<std::result::Result<_, _>>()?;
    let (lm, lm_meta) = load(cfg, ModelKind::Lm)?;
    let mut discs = Vec::new();
    for &f in &families {
        let (d, meta) = load_discriminator(cfg, f)?;
        same_vocab(&lm_meta, &meta)?;
        discs.push((f.short_name(), d));
    }

    let mut records: Vec<StepCostRecord> = Vec::new();
    let mut fits = Vec::new();
    for (name, disc) in &discs {
        let recs = profile_generation(
            &lm,
            disc,
            name,
            &cfg.search,
            cfg.bench.num_batches,
            cfg.bench.batch_size,
            cfg.seed,
        )?;
        let window: Vec<&StepCostRecord> = recs.iter().filter(|r| (4..=64).contains(&r.step)).collect();
        let xs: Vec<f64> = window.iter().map(|r| r.step as f64).collect();
        let ys: Vec<f64> = window.iter().map(|r| r.attention_scores).collect();
        if xs.len() >= 3 {
            let lin = fit_polynomial(&xs, &ys, 1)?;
            let quad = fit_polynomial(&xs, &ys, 2)?;
            eprintln!(
                "{name}: {} steps, attention-score R^2 linear {:.4} quadratic {:.4}",
                recs.len(),
                lin.r_squared,
                quad.r_squared
            );
            fits.push(CurveFit {
                family: name.to_string(),
                steps: (window[0].step, window[window.len() - 1].step),
                linear_r_squared: lin.r_squared,
                quadratic_r_squared: quad.r_squared,
                quadratic_coefficients: quad.coefficients,
            });
        }
        records.extend(recs);
    }
    emit_cost_csv(&records, &cfg.plots_dir().join(FIG2_FILE))?;

    let pairs: Vec<(&str, &Discriminator)> = discs.iter().map(|(n, d)| (*n, d)).collect();
    let accounting = forward_pass_accounting(
        &lm,
        &pairs,
        &cfg.search,
        &cfg.bench.c_puct_sweep,
        cfg.bench.accounting_sequences,
        cfg.seed,
    )?;
    let bench_dir = cfg.out_dir().join("bench");
    fs::create_dir_all(&bench_dir).map_err(Error::from)?;
    let mut w = csv::Writer::from_path(bench_dir.join("accounting.csv")).map_err(Error::from)?;
    w.write_record(["c_puct", "family", "sequences", "forward_passes", "attention_scores", "width", "mean_length"])
        .map_err(Error::from)?;
    for r in &accounting {
        w.write_record([
            r.c_puct.to_string(),
            r.family.clone(),
            r.sequences.to_string(),
            format!("{:.3}", r.forward_passes),
            format!("{:.3}", r.attention_scores),
            format!("{:.4}", r.width),
            format!("{:.3}", r.mean_length),
        ])
        .map_err(Error::from)?;
    }
    w.flush().map_err(Error::from)?;
    fs::write(
        bench_dir.join("summary.json"),
        serde_json::to_vec_pretty(&BenchSummary { fits, accounting }).map_err(Error::from)?,
    )
    .map_err(Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn samples_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        let meta = SamplesMeta {
            family: "uni".into(),
            n: 1,
            class: Some(1),
            seed: 4,
            vocab: "ab".into(),
            class_names: vec!["x".into(), "y".into()],
            search: SearchParams::default(),
        };
        let recs = vec![SampleRecord {
            text: "ab".into(),
            target_class: 1,
            family: "uni".into(),
            seed: 4,
        }];
        write_samples(&path, &meta, &recs).unwrap();
        let (m, r) = read_samples(&path).unwrap();
        assert_eq!(m.seed, 4);
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].text, "ab");
        assert!(matches!(read_samples(&dir.path().join("missing")), Err(Error::Configuration(_))));
    }

    #[test]
    fn family_names() {
        assert!(matches!(parse_family("none"), Ok(None)));
        assert!(matches!(parse_family("gedi"), Ok(Some(Family::Generative))));
        assert!(matches!(parse_family("x"), Err(Failure::Usage(_))));
    }
}
