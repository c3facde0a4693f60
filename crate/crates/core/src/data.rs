//! Character vocabulary, labeled JSONL corpora and prefix sampling.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const BOS: TokenId = 0;
pub const EOS: TokenId = 1;
pub const PAD: TokenId = 2;
pub const NUM_SPECIAL: usize = 3;

/// Longest token sequence (BOS included) kept at load time.
pub const L_MAX: usize = 64;

/// Character-level vocabulary with three reserved ids (BOS, EOS, PAD).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    chars: Vec<char>,
    id_of: HashMap<char, TokenId>,
}

impl Vocabulary {
    pub fn from_chars(chars: impl IntoIterator<Item = char>) -> Result<Self> {
        let set: BTreeSet<char> = chars.into_iter().collect();
        if set.is_empty() {
            return Err(Error::Ingestion("cannot build a vocabulary from no characters".into()));
        }
        let chars: Vec<char> = set.into_iter().collect();
        let id_of = chars
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, (i + NUM_SPECIAL) as TokenId))
            .collect();
        Ok(Self { chars, id_of })
    }

    /// Number of ids, specials included.
    pub fn len(&self) -> usize {
        self.chars.len() + NUM_SPECIAL
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn id_of(&self, c: char) -> Option<TokenId> {
        self.id_of.get(&c).copied()
    }

    pub fn char_of(&self, id: TokenId) -> Option<char> {
        (id as usize)
            .checked_sub(NUM_SPECIAL)
            .and_then(|i| self.chars.get(i).copied())
    }

    pub fn is_special(id: TokenId) -> bool {
        (id as usize) < NUM_SPECIAL
    }

    /// BOS followed by one id per character.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        let mut ids = Vec::with_capacity(text.len() + 1);
        ids.push(BOS);
        for (offset, ch) in text.chars().enumerate() {
            ids.push(self.id_of(ch).ok_or(Error::Encoding { ch, offset })?);
        }
        Ok(ids)
    }

    /// Inverse of `encode`; special ids are dropped.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        ids.iter()
            .filter(|&&id| !Self::is_special(id))
            .map(|&id| {
                self.char_of(id).ok_or_else(|| {
                    Error::Validation(format!("token id {id} outside vocabulary of {}", self.len()))
                })
            })
            .collect()
    }
}

/// Deterministic vocabulary: characters sorted by code point, ids after the specials.
pub fn build_vocab(corpus_text: impl IntoIterator<Item = char>) -> Result<Vocabulary> {
    Vocabulary::from_chars(corpus_text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
    OracleTrain,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Validation, Split::Test, Split::OracleTrain];

    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.jsonl",
            Split::Validation => "validation.jsonl",
            Split::Test => "test.jsonl",
            Split::OracleTrain => "oracle_train.jsonl",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledExample {
    pub tokens: Vec<TokenId>,
    pub label: usize,
}

impl LabeledExample {
    /// Number of non-special tokens.
    pub fn text_len(&self) -> usize {
        self.tokens.len() - 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledCorpus {
    pub examples: Vec<LabeledExample>,
    pub num_classes: usize,
    pub split: Split,
}

impl LabeledCorpus {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn validate_train(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Validation(format!(
                "corpus declares {} class(es); at least 2 are required",
                self.num_classes
            )));
        }
        let mut seen = vec![false; self.num_classes];
        for ex in &self.examples {
            seen[ex.label] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Validation(format!(
                "class {missing} never appears in the {:?} split",
                self.split
            )));
        }
        Ok(())
    }
}

/// One line of a corpus file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawExample {
    pub text: String,
    pub label: usize,
}

/// Sidecar `meta.json` describing a dataset directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub name: String,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    #[serde(default)]
    pub seed: Option<u64>,
}

pub const META_FILE: &str = "meta.json";

/// Parses a JSONL corpus, checking labels against `num_classes`.
/// Texts longer than `L_MAX - 1` characters are truncated.
pub fn read_jsonl(path: &Path, num_classes: usize) -> Result<Vec<RawExample>> {
    let file = fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut ex: RawExample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if ex.label >= num_classes {
            return Err(Error::Validation(format!(
                "line {}: label {} but only {num_classes} classes declared",
                i + 1,
                ex.label
            )));
        }
        if ex.text.chars().count() > L_MAX - 1 {
            ex.text = ex.text.chars().take(L_MAX - 1).collect();
        }
        out.push(ex);
    }
    if out.is_empty() {
        return Err(Error::Ingestion(format!("{} contains no examples", path.display())));
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, examples: &[RawExample]) -> Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    for ex in examples {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_corpus(
    path: &Path,
    num_classes: usize,
    vocab: &Vocabulary,
    split: Split,
) -> Result<LabeledCorpus> {
    let raw = read_jsonl(path, num_classes)?;
    let mut examples = Vec::with_capacity(raw.len());
    for (i, ex) in raw.into_iter().enumerate() {
        if ex.text.is_empty() {
            return Err(Error::Validation(format!(
                "{} line {}: empty text",
                path.display(),
                i + 1
            )));
        }
        examples.push(LabeledExample {
            tokens: vocab.encode(&ex.text)?,
            label: ex.label,
        });
    }
    Ok(LabeledCorpus {
        examples,
        num_classes,
        split,
    })
}

/// Uniformly chosen non-empty prefix: BOS plus the first `k` characters,
/// `k ~ Uniform{1, ..., T}`.
pub fn sample_training_prefix<R: Rng + ?Sized>(
    example: &LabeledExample,
    rng: &mut R,
) -> (Vec<TokenId>, usize) {
    let t = example.text_len();
    debug_assert!(t >= 1);
    let k = rng.gen_range(1..=t);
    (example.tokens[..=k].to_vec(), example.label)
}

/// A dataset directory: metadata, a shared vocabulary and the four splits.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub meta: CorpusMeta,
    pub vocab: Vocabulary,
    pub train: LabeledCorpus,
    pub validation: LabeledCorpus,
    pub test: LabeledCorpus,
    pub oracle_train: LabeledCorpus,
}

impl Dataset {
    /// Loads `meta.json` and every split; the vocabulary covers all splits.
    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(META_FILE);
        let meta: CorpusMeta = serde_json::from_slice(&fs::read(&meta_path).map_err(|e| {
            Error::Ingestion(format!("cannot read {}: {e}", meta_path.display()))
        })?)?;
        if meta.num_classes < 2 || meta.class_names.len() != meta.num_classes {
            return Err(Error::Validation(format!(
                "meta declares {} classes with {} names",
                meta.num_classes,
                meta.class_names.len()
            )));
        }
        let mut raws = Vec::new();
        for split in Split::ALL {
            raws.push(read_jsonl(&dir.join(split.file_name()), meta.num_classes)?);
        }
        let vocab = build_vocab(raws.iter().flatten().flat_map(|ex| ex.text.chars()))?;
        let mut corpora = Split::ALL
            .iter()
            .map(|&split| load_corpus(&dir.join(split.file_name()), meta.num_classes, &vocab, split))
            .collect::<Result<Vec<_>>>()?
            .into_iter();
        let ds = Self {
            meta,
            vocab,
            train: corpora.next().unwrap(),
            validation: corpora.next().unwrap(),
            test: corpora.next().unwrap(),
            oracle_train: corpora.next().unwrap(),
        };
        ds.train.validate_train()?;
        ds.oracle_train.validate_train()?;
        Ok(ds)
    }

    pub fn split(&self, split: Split) -> &LabeledCorpus {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
            Split::OracleTrain => &self.oracle_train,
        }
    }
}

pub mod synth {
    //! Seeded generators for the two bundled desk-scale corpora.

    use std::collections::HashSet;

    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[derive(Debug, Clone, Copy, PartialEq, Eq)]
    pub enum Generator {
        Polarity2,
        Topic4,
    }

    impl std::str::FromStr for Generator {
        type Err = Error;
        fn from_str(s: &str) -> Result<Self> {
            match s {
                "polarity2" => Ok(Self::Polarity2),
                "topic4" => Ok(Self::Topic4),
                other => Err(Error::Configuration(format!(
                    "unknown dataset generator {other:?} (expected polarity2 or topic4)"
                ))),
            }
        }
    }

    impl Generator {
        pub fn name(self) -> &'static str {
            match self {
                Self::Polarity2 => "polarity2",
                Self::Topic4 => "topic4",
            }
        }

        pub fn class_names(self) -> Vec<String> {
            let names: &[&str] = match self {
                Self::Polarity2 => &["negative", "positive"],
                Self::Topic4 => &["world", "sport", "business", "science"],
            };
            names.iter().map(|s| s.to_string()).collect()
        }

        fn sample<R: Rng>(self, label: usize, rng: &mut R) -> String {
            match self {
                Self::Polarity2 => polarity(label, rng),
                Self::Topic4 => topic(label, rng),
            }
        }
    }

    /// Example counts per split.
    #[derive(Debug, Clone, Copy, PartialEq, Eq)]
    pub struct SplitSizes {
        pub train: usize,
        pub validation: usize,
        pub test: usize,
        pub oracle_train: usize,
    }

    impl Default for SplitSizes {
        fn default() -> Self {
            Self {
                train: 2000,
                validation: 400,
                test: 400,
                oracle_train: 1200,
            }
        }
    }

    impl SplitSizes {
        fn get(&self, split: Split) -> usize {
            match split {
                Split::Train => self.train,
                Split::Validation => self.validation,
                Split::Test => self.test,
                Split::OracleTrain => self.oracle_train,
            }
        }
    }

    fn pick<'a, R: Rng>(rng: &mut R, xs: &[&'a str]) -> &'a str {
        xs.choose(rng).copied().unwrap()
    }

    fn polarity<R: Rng>(label: usize, rng: &mut R) -> String {
        const OPENERS: &[&str] = &["the", "this", "my", "our", "one"];
        const PRODUCTS: &[&str] = &[
            "phone", "lamp", "blender", "camera", "jacket", "kettle", "toaster", "chair",
            "headset", "backpack", "charger", "mixer",
        ];
        const VERBS: &[&str] = &["is", "was", "looks", "feels", "seems"];
        const INTENS: &[&str] = &["", "really ", "very ", "quite ", "so ", "truly "];
        const NEG_ADJ: &[&str] = &["awful", "terrible", "flimsy", "useless", "broken", "cheap", "noisy"];
        const POS_ADJ: &[&str] = &["great", "excellent", "lovely", "sturdy", "perfect", "amazing", "reliable"];
        const NEG_TAIL: &[&str] = &[
            "i hate it", "never buying again", "do not recommend", "stopped working fast",
            "waste of money", "one star",
        ];
        const POS_TAIL: &[&str] = &[
            "i love it", "would buy again", "highly recommend", "works like a charm",
            "worth every penny", "five stars",
        ];
        const NEUTRAL_TAIL: &[&str] = &["arrived on time", "came in a box", "got it last week"];
        let (adj, tail) = if label == 1 { (POS_ADJ, POS_TAIL) } else { (NEG_ADJ, NEG_TAIL) };
        let tail = if rng.gen_bool(0.25) { NEUTRAL_TAIL } else { tail };
        format!(
            "{} {} {} {}{}. {}",
            pick(rng, OPENERS),
            pick(rng, PRODUCTS),
            pick(rng, VERBS),
            pick(rng, INTENS),
            pick(rng, adj),
            pick(rng, tail)
        )
    }

    fn topic<R: Rng>(label: usize, rng: &mut R) -> String {
        const OPENERS: &[&str] = &["today", "on monday", "reports say", "late on friday", "this week"];
        const TABLE: [[&[&str]; 3]; 4] = [
            [
                &["the minister", "rebel leaders", "the president", "border guards", "un envoys"],
                &["met with", "warned", "signed a pact with", "condemned"],
                &["neighbouring states", "the new government", "protesters", "foreign allies"],
            ],
            [
                &["the striker", "the home team", "the coach", "the champion"],
                &["scored against", "beat", "lost to", "drew with"],
                &["the rivals", "the league leaders", "the visitors", "the defending champs"],
            ],
            [
                &["the bank", "shareholders", "the retailer", "oil firms"],
                &["raised prices for", "cut jobs at", "bought shares of", "reported profits to"],
                &["investors", "the markets", "its suppliers", "wall street"],
            ],
            [
                &["researchers", "the space agency", "biologists", "the lab"],
                &["discovered", "launched", "tested", "sequenced"],
                &["a new probe", "a distant planet", "the genome", "a quantum chip"],
            ],
        ];
        let [subj, verb, obj] = TABLE[label];
        format!(
            "{} {} {} {}",
            pick(rng, OPENERS),
            pick(rng, subj),
            pick(rng, verb),
            pick(rng, obj)
        )
    }

    /// Generates class-balanced, pairwise-disjoint splits.
    pub fn generate(
        generator: Generator,
        seed: u64,
        sizes: SplitSizes,
    ) -> Result<(CorpusMeta, Vec<(Split, Vec<RawExample>)>)> {
        let num_classes = generator.class_names().len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seen = HashSet::new();
        let mut splits = Vec::new();
        for split in Split::ALL {
            let n = sizes.get(split);
            let mut examples = Vec::with_capacity(n);
            let mut attempts = 0usize;
            while examples.len() < n {
                let label = examples.len() % num_classes;
                let text = generator.sample(label, &mut rng);
                attempts += 1;
                if attempts > 200 * n.max(1) {
                    return Err(Error::Configuration(format!(
                        "{} cannot produce {n} distinct examples for split {split:?}",
                        generator.name()
                    )));
                }
                if seen.insert(text.clone()) {
                    examples.push(RawExample { text, label });
                }
            }
            examples.shuffle(&mut rng);
            splits.push((split, examples));
        }
        let meta = CorpusMeta {
            name: generator.name().to_string(),
            num_classes,
            class_names: generator.class_names(),
            seed: Some(seed),
        };
        Ok((meta, splits))
    }

    /// Writes `meta.json` plus one JSONL file per split into `dir`.
    pub fn write_dataset(
        dir: &Path,
        generator: Generator,
        seed: u64,
        sizes: SplitSizes,
    ) -> Result<CorpusMeta> {
        let (meta, splits) = generate(generator, seed, sizes)?;
        fs::create_dir_all(dir)?;
        for (split, examples) in &splits {
            write_jsonl(&dir.join(split.file_name()), examples)?;
        }
        fs::write(dir.join(META_FILE), serde_json::to_vec_pretty(&meta)?)?;
        Ok(meta)
    }
}
