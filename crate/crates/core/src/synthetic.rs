//! Deterministic keyword corpus for end-to-end checks.
//!
//! Each statute is defined by one keyword. A case is a list of filler
//! sentences into which the keywords of its gold statutes are planted, one
//! keyword-bearing sentence per gold statute, so the gold set is exactly the
//! set of statutes whose keyword occurs in the text. Filler sentences carry
//! dates and amounts so that digit masking has something to do.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CaseDescription, Dataset, Split, StatuteRegistry};
use crate::model::{ModelConfig, TrainerOptions};

/// Hashing-embedder width and seed used for the synthetic corpus.
pub const EMBED_DIM: usize = 32;
pub const EMBED_SEED: u64 = 7;

pub const KEYWORDS: [&str; 16] = [
    "arson",
    "forgery",
    "bribery",
    "perjury",
    "trespass",
    "extortion",
    "smuggling",
    "kidnapping",
    "poaching",
    "embezzlement",
    "vandalism",
    "counterfeiting",
    "stalking",
    "piracy",
    "blackmail",
    "espionage",
];

const FILLER: [&str; 14] = [
    "the",
    "applicant",
    "court",
    "police",
    "hearing",
    "witness",
    "was",
    "recorded",
    "appeal",
    "officer",
    "filed",
    "district",
    "statement",
    "later",
];

const MONTHS: [&str; 4] = ["january", "april", "july", "october"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub statutes: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub min_sentences: usize,
    pub max_sentences: usize,
    /// Gold statutes per case are drawn uniformly from `1..=max_labels`.
    pub max_labels: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            statutes: 12,
            train: 600,
            dev: 100,
            test: 100,
            min_sentences: 10,
            max_sentences: 40,
            max_labels: 3,
            seed: 1,
        }
    }
}

pub fn statute_keyword(id: usize) -> &'static str {
    KEYWORDS[id]
}

fn filler_sentence(rng: &mut ChaCha8Rng) -> Vec<String> {
    let len = rng.random_range(3..=5);
    let mut words: Vec<String> = (0..len)
        .map(|_| FILLER.choose(rng).expect("non-empty").to_string())
        .collect();
    if rng.random_bool(0.25) {
        words.push("on".into());
        words.push(rng.random_range(1..=28).to_string());
        words.push(MONTHS.choose(rng).expect("non-empty").to_string());
        words.push(rng.random_range(1990..=2020).to_string());
    }
    words
}

fn render(words: &[String]) -> String {
    let mut s = words.join(" ");
    if let Some(first) = s.get(..1) {
        s = first.to_uppercase() + &s[1..];
    }
    s.push('.');
    s
}

fn case(rng: &mut ChaCha8Rng, spec: &SyntheticSpec, case_id: String, split: Split) -> CaseDescription {
    let n = rng.random_range(spec.min_sentences..=spec.max_sentences);
    let k = rng.random_range(1..=spec.max_labels.min(spec.statutes));
    let ids: Vec<usize> = (0..spec.statutes).collect();
    let gold: BTreeSet<usize> = ids.choose_multiple(rng, k).copied().collect();
    let mut sentences: Vec<Vec<String>> = (0..n).map(|_| filler_sentence(rng)).collect();
    let mut slots: Vec<usize> = (0..n).collect();
    slots.shuffle(rng);
    for (&label, &slot) in gold.iter().zip(&slots) {
        let words = &mut sentences[slot];
        let at = rng.random_range(0..=words.len());
        words.insert(at, KEYWORDS[label].to_string());
    }
    CaseDescription {
        case_id,
        sentences: sentences.iter().map(|w| render(w)).collect(),
        gold_labels: gold,
        split,
    }
}

/// Builds the corpus. Everything is a function of `spec`.
pub fn generate(spec: &SyntheticSpec) -> Dataset {
    assert!(
        (1..=KEYWORDS.len()).contains(&spec.statutes),
        "between 1 and {} synthetic statutes",
        KEYWORDS.len()
    );
    assert!(spec.min_sentences >= 1 && spec.min_sentences <= spec.max_sentences);
    assert!(spec.max_labels >= 1 && spec.max_labels <= spec.min_sentences);
    let registry = StatuteRegistry::from_pairs((0..spec.statutes).map(|i| {
        (
            format!("Section {}", 101 + i),
            format!(
                "Whoever commits {} shall be punished with imprisonment or fine.",
                KEYWORDS[i]
            ),
        )
    }))
    .expect("synthetic registry is valid");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut split = |count: usize, split: Split| -> Vec<CaseDescription> {
        (0..count)
            .map(|i| case(&mut rng, spec, format!("{split}-{i:04}"), split))
            .collect()
    };
    let train = split(spec.train, Split::Train);
    let dev = split(spec.dev, Split::Dev);
    let test = split(spec.test, Split::Test);
    Dataset {
        registry,
        train,
        dev,
        test,
    }
}

/// Model sizes that suit the synthetic corpus at [`EMBED_DIM`].
pub fn model_config(num_statutes: usize) -> ModelConfig {
    ModelConfig {
        heads: 3,
        input_dim: EMBED_DIM,
        attn_dim: 16,
        hidden_dim: 128,
        ..ModelConfig::new(num_statutes)
    }
}

/// Default schedule with a learning rate raised to suit the small model.
pub fn trainer_options(seed: u64) -> TrainerOptions {
    TrainerOptions {
        learning_rate: 1e-2,
        seed,
        ..TrainerOptions::default()
    }
}

/// True when `sentence` contains the keyword of `statute` as a word.
pub fn mentions(sentence: &str, statute: usize) -> bool {
    let kw = KEYWORDS[statute];
    sentence
        .split(|c: char| !c.is_alphanumeric())
        .any(|w| w.eq_ignore_ascii_case(kw))
}
