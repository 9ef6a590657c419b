//! Tokenization, vocabulary and `(context, target)` enumeration.
//!
//! Raw text is split into documents on blank lines. Every document is stored
//! with a leading beginning-of-sequence marker so that each position, including
//! the first, has a non-empty context that can be borrowed as a slice.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;
use std::sync::Arc;

use crate::{Error, Result, TokenId};

/// Surface form of the beginning-of-sequence marker.
pub const BOS_TOKEN: &str = "<s>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum TokenizeMode {
    #[default]
    Whitespace,
    /// One token per non-whitespace character.
    Char,
}

impl FromStr for TokenizeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "whitespace" | "word" => Ok(TokenizeMode::Whitespace),
            "char" => Ok(TokenizeMode::Char),
            other => Err(Error::invalid(format!("unknown tokenize mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Split {
    #[default]
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

/// Bijection between token strings and `[0, len)`. The bos marker always
/// takes id 0; the remaining ids follow first-occurrence order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
    bos_id: TokenId,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let mut vocab = Vocabulary {
            tokens: Vec::new(),
            ids: HashMap::new(),
            bos_id: 0,
        };
        vocab.bos_id = vocab.intern(BOS_TOKEN);
        vocab
    }

    /// Rebuilds a vocabulary from its token list, e.g. as read from a
    /// vocabulary file. The first token must be the bos marker.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        if tokens.first().map(String::as_str) != Some(BOS_TOKEN) {
            return Err(Error::Corrupt("vocabulary must start with the bos marker".into()));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if ids.insert(tok.clone(), i as TokenId).is_some() {
                return Err(Error::Corrupt(format!("duplicate vocabulary token {tok:?}")));
            }
        }
        Ok(Vocabulary { tokens, ids, bos_id: 0 })
    }

    pub fn intern(&mut self, token: &str) -> TokenId {
        if let Some(&id) = self.ids.get(token) {
            return id;
        }
        let id = self.tokens.len() as TokenId;
        self.tokens.push(token.to_owned());
        self.ids.insert(token.to_owned(), id);
        id
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn bos_id(&self) -> TokenId {
        self.bos_id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Looks up every token of `text` (split per `mode`) without extending
    /// the vocabulary.
    pub fn encode_text(&self, text: &str, mode: TokenizeMode) -> Result<Vec<TokenId>> {
        split_tokens(text, mode)
            .map(|tok| {
                match self.id(tok) {
                    Some(id) if id != self.bos_id => Ok(id),
                    _ => Err(Error::UnknownToken(tok.to_owned())),
                }
            })
            .collect()
    }

    /// One token per line; the line number is the id.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        for tok in &self.tokens {
            writeln!(w, "{tok}")?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let tokens = r.lines().collect::<std::io::Result<Vec<_>>>()?;
        Self::from_tokens(tokens)
    }
}

fn split_tokens(text: &str, mode: TokenizeMode) -> Box<dyn Iterator<Item = &str> + '_> {
    match mode {
        TokenizeMode::Whitespace => Box::new(text.split_whitespace()),
        TokenizeMode::Char => Box::new(
            text.char_indices()
                .filter(|(_, c)| !c.is_whitespace())
                .map(move |(i, c)| &text[i..i + c.len_utf8()]),
        ),
    }
}

/// Splits raw text into documents on blank (whitespace-only) lines.
fn split_documents(raw: &str) -> Vec<String> {
    let mut docs = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for line in raw.lines() {
        if line.trim().is_empty() {
            if !current.is_empty() {
                docs.push(current.join("\n"));
                current.clear();
            }
        } else {
            current.push(line);
        }
    }
    if !current.is_empty() {
        docs.push(current.join("\n"));
    }
    docs
}

/// A tokenized collection of documents sharing one vocabulary.
#[derive(Debug, Clone)]
pub struct Corpus {
    // Each sequence is `[bos, doc...]`.
    sequences: Vec<Vec<TokenId>>,
    vocab: Arc<Vocabulary>,
    source: Split,
}

/// One `(context, target)` example: the context is the bos-prefixed prefix
/// preceding `position`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContextTargetPair<'a> {
    pub doc_index: usize,
    pub position: usize,
    pub context: &'a [TokenId],
    pub target: TokenId,
}

impl Corpus {
    /// Tokenizes `raw` into a fresh vocabulary.
    pub fn tokenize(raw: &str, mode: TokenizeMode) -> Result<Self> {
        let mut vocab = Vocabulary::new();
        let docs = tokenize_into(raw, mode, &mut vocab)?;
        Ok(Self::from_parts(docs, Arc::new(vocab), Split::Train))
    }

    /// Tokenizes a train/validation pair into one shared vocabulary, assigning
    /// train tokens first.
    pub fn tokenize_pair(train: &str, valid: &str, mode: TokenizeMode) -> Result<(Self, Self)> {
        let mut vocab = Vocabulary::new();
        let train_docs = tokenize_into(train, mode, &mut vocab)?;
        let valid_docs = tokenize_into(valid, mode, &mut vocab)?;
        let vocab = Arc::new(vocab);
        Ok((
            Self::from_parts(train_docs, vocab.clone(), Split::Train),
            Self::from_parts(valid_docs, vocab, Split::Validation),
        ))
    }

    /// Tokenizes `raw` against an existing vocabulary; unknown tokens are an
    /// error.
    pub fn tokenize_with(raw: &str, mode: TokenizeMode, vocab: Arc<Vocabulary>, source: Split) -> Result<Self> {
        let docs: Vec<Vec<TokenId>> = split_documents(raw)
            .iter()
            .map(|doc| vocab.encode_text(doc, mode))
            .filter(|doc| !matches!(doc, Ok(d) if d.is_empty()))
            .collect::<Result<_>>()?;
        if docs.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok(Self::from_parts(docs, vocab, source))
    }

    /// Builds a corpus from already-encoded documents. Empty documents are
    /// dropped.
    pub fn from_documents(documents: Vec<Vec<TokenId>>, vocab: Arc<Vocabulary>, source: Split) -> Result<Self> {
        let documents: Vec<_> = documents.into_iter().filter(|d| !d.is_empty()).collect();
        if documents.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        for doc in &documents {
            for &id in doc {
                if id as usize >= vocab.len() {
                    return Err(Error::TokenOutOfRange { id, vocab_size: vocab.len() });
                }
                if id == vocab.bos_id() {
                    return Err(Error::invalid("bos marker inside a document"));
                }
            }
        }
        Ok(Self::from_parts(documents, vocab, source))
    }

    fn from_parts(documents: Vec<Vec<TokenId>>, vocab: Arc<Vocabulary>, source: Split) -> Self {
        let bos = vocab.bos_id();
        let sequences = documents
            .into_iter()
            .map(|doc| {
                let mut seq = Vec::with_capacity(doc.len() + 1);
                seq.push(bos);
                seq.extend(doc);
                seq
            })
            .collect();
        Corpus { sequences, vocab, source }
    }

    pub fn vocab(&self) -> &Arc<Vocabulary> {
        &self.vocab
    }

    pub fn source(&self) -> Split {
        self.source
    }

    pub fn with_source(mut self, source: Split) -> Self {
        self.source = source;
        self
    }

    pub fn num_documents(&self) -> usize {
        self.sequences.len()
    }

    /// Tokens of document `i`, without the bos marker.
    pub fn document(&self, i: usize) -> &[TokenId] {
        &self.sequences[i][1..]
    }

    /// Document `i` with its leading bos marker.
    pub fn bos_prefixed(&self, i: usize) -> &[TokenId] {
        &self.sequences[i]
    }

    pub fn documents(&self) -> impl ExactSizeIterator<Item = &[TokenId]> + '_ {
        self.sequences.iter().map(|s| &s[1..])
    }

    pub fn token_count(&self) -> usize {
        self.sequences.iter().map(|s| s.len() - 1).sum()
    }

    /// Every `(context, target)` pair in document order, then position order.
    pub fn iter_pairs(&self) -> impl Iterator<Item = ContextTargetPair<'_>> + '_ {
        self.sequences.iter().enumerate().flat_map(|(doc_index, seq)| {
            (0..seq.len() - 1).map(move |position| ContextTargetPair {
                doc_index,
                position,
                context: &seq[..=position],
                target: seq[position + 1],
            })
        })
    }

    /// Space-joined surface form of document `i`.
    pub fn render_document(&self, i: usize) -> String {
        self.document(i)
            .iter()
            .map(|&id| self.vocab.token(id).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Single CSV row: `documents,tokens,vocab_size`.
    pub fn write_stats_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["documents", "tokens", "vocab_size"])?;
        out.write_record([
            self.num_documents().to_string(),
            self.token_count().to_string(),
            self.vocab.len().to_string(),
        ])?;
        out.flush()?;
        Ok(())
    }
}

fn tokenize_into(raw: &str, mode: TokenizeMode, vocab: &mut Vocabulary) -> Result<Vec<Vec<TokenId>>> {
    let docs: Vec<Vec<TokenId>> = split_documents(raw)
        .iter()
        .map(|doc| split_tokens(doc, mode).map(|tok| vocab.intern(tok)).collect::<Vec<_>>())
        .filter(|doc| !doc.is_empty())
        .collect();
    if docs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(docs)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverlapRow {
    pub n: usize,
    /// Fraction of distinct validation n-grams seen in train.
    pub type_fraction: f64,
    /// Fraction of validation n-gram occurrences seen in train.
    pub occurrence_fraction: f64,
    /// False when the validation set has no n-gram of this length; both
    /// fractions are then reported as 0.
    pub defined: bool,
}

/// Train/validation n-gram overlap for `n = 1..=n_max`. N-grams never span
/// document boundaries.
pub fn ngram_overlap(train: &Corpus, valid: &Corpus, n_max: usize) -> Result<Vec<OverlapRow>> {
    if n_max == 0 {
        return Err(Error::invalid("n_max must be at least 1"));
    }
    if !Arc::ptr_eq(train.vocab(), valid.vocab()) && train.vocab() != valid.vocab() {
        return Err(Error::invalid("train and validation corpora must share a vocabulary"));
    }
    let rows = (1..=n_max)
        .map(|n| {
            let seen: HashSet<&[TokenId]> = train.documents().flat_map(|d| d.windows(n)).collect();
            let mut types: HashSet<&[TokenId]> = HashSet::new();
            let (mut occurrences, mut hits) = (0usize, 0usize);
            for gram in valid.documents().flat_map(|d| d.windows(n)) {
                occurrences += 1;
                if seen.contains(gram) {
                    hits += 1;
                }
                types.insert(gram);
            }
            if occurrences == 0 {
                return OverlapRow { n, type_fraction: 0.0, occurrence_fraction: 0.0, defined: false };
            }
            let type_hits = types.iter().filter(|g| seen.contains(*g)).count();
            OverlapRow {
                n,
                type_fraction: type_hits as f64 / types.len() as f64,
                occurrence_fraction: hits as f64 / occurrences as f64,
                defined: true,
            }
        })
        .collect();
    Ok(rows)
}

/// Writes `n,type_fraction,occ_fraction,defined`.
pub fn write_overlap_csv<W: Write>(rows: &[OverlapRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["n", "type_fraction", "occ_fraction", "defined"])?;
    for row in rows {
        out.write_record([
            row.n.to_string(),
            row.type_fraction.to_string(),
            row.occurrence_fraction.to_string(),
            row.defined.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
