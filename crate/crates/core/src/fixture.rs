//! Seeded synthetic corpora for tests and demos.
//!
//! Documents are separated by blank lines, as [`crate::Corpus::tokenize`]
//! expects.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Raw train and validation text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixtureText {
    pub train: String,
    pub valid: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FixtureParams {
    pub vocab_words: usize,
    pub phrases: usize,
    pub phrase_len: (usize, usize),
    pub train_docs: usize,
    pub train_doc_len: usize,
    pub valid_docs: usize,
    pub valid_doc_len: (usize, usize),
    pub seed: u64,
}

impl Default for FixtureParams {
    fn default() -> Self {
        FixtureParams {
            vocab_words: 200,
            phrases: 60,
            phrase_len: (3, 7),
            train_docs: 40,
            train_doc_len: 120,
            valid_docs: 6,
            valid_doc_len: (40, 60),
            seed: 0,
        }
    }
}

fn word(i: usize) -> String {
    format!("w{i}")
}

fn join(docs: &[Vec<String>]) -> String {
    docs.iter().map(|d| d.join(" ")).collect::<Vec<_>>().join("\n\n")
}

/// Training documents assembled from a bank of recurring phrases.
fn phrase_documents(params: &FixtureParams, rng: &mut ChaCha8Rng) -> Vec<Vec<String>> {
    let bank: Vec<Vec<String>> = (0..params.phrases)
        .map(|_| {
            let len = rng.gen_range(params.phrase_len.0..=params.phrase_len.1);
            (0..len).map(|_| word(rng.gen_range(0..params.vocab_words))).collect()
        })
        .collect();
    (0..params.train_docs)
        .map(|_| {
            let mut doc = Vec::new();
            while doc.len() < params.train_doc_len {
                doc.extend(bank.choose(rng).unwrap().iter().cloned());
            }
            doc
        })
        .collect()
}

/// Validation documents are verbatim spans of training documents, so long
/// stretches can be followed through pointers.
pub fn repetitive(params: &FixtureParams) -> FixtureText {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let train = phrase_documents(params, &mut rng);
    let valid: Vec<Vec<String>> = (0..params.valid_docs)
        .map(|_| {
            let doc = train.choose(&mut rng).unwrap();
            let len = rng.gen_range(params.valid_doc_len.0..=params.valid_doc_len.1).min(doc.len());
            let start = rng.gen_range(0..=doc.len() - len);
            doc[start..start + len].to_vec()
        })
        .collect();
    FixtureText { train: join(&train), valid: join(&valid) }
}

/// Validation documents are uniform word draws, sharing almost no n-grams
/// (n ≥ 2) with the phrase-built training text.
pub fn novel(params: &FixtureParams) -> FixtureText {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let train = phrase_documents(params, &mut rng);
    let valid: Vec<Vec<String>> = (0..params.valid_docs)
        .map(|_| {
            let len = rng.gen_range(params.valid_doc_len.0..=params.valid_doc_len.1);
            (0..len).map(|_| word(rng.gen_range(0..params.vocab_words))).collect()
        })
        .collect();
    FixtureText { train: join(&train), valid: join(&valid) }
}

/// Two training sentences that share the prefix shape `... is X biden`.
pub fn shared_prefix() -> FixtureText {
    FixtureText {
        train: "the president is joe biden\n\nmy neighbor is joseph biden".into(),
        valid: "the president is joseph biden".into(),
    }
}
