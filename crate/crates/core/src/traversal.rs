//! The search-or-traverse inference loop.
//!
//! A traversal starts with a full kNN search; the active states are the
//! clusters of the retrieved entries. After a token `w` is consumed the
//! session moves to `T = δ̂(S, w)`. If `|T| ≥ τ` that is the next state set and
//! no search happens; otherwise a new search runs and its states are added to
//! `T`. The next-token distribution interpolates `p_auto` over (at most
//! `max_knns`) member entries of the active states with the base LM.

use std::fmt;
use std::str::FromStr;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::automaton::p_auto_entries;
use crate::datastore::{interpolate, KnnIndex};
use crate::{Automaton, BaseLm, ContextEncoder, Datastore, EntryId, Error, Result, StateSet, TokenId};

/// Restart threshold. `Infinite` searches at every step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tau {
    Finite(usize),
    Infinite,
}

impl Tau {
    /// Whether `successors` new states are enough to skip the search.
    pub fn allows(self, successors: usize) -> bool {
        match self {
            Tau::Finite(t) => successors >= t,
            Tau::Infinite => false,
        }
    }
}

impl FromStr for Tau {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "inf" | "infinity" | "∞" => Ok(Tau::Infinite),
            other => match other.parse::<usize>() {
                Ok(t) if t >= 1 => Ok(Tau::Finite(t)),
                _ => Err(Error::invalid(format!("tau must be a positive integer or \"inf\", got {other:?}"))),
            },
        }
    }
}

impl fmt::Display for Tau {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tau::Finite(t) => write!(f, "{t}"),
            Tau::Infinite => f.write_str("inf"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraversalConfig {
    pub tau: Tau,
    /// Neighbors retrieved per search.
    pub k_neigh: usize,
    /// Cap on the entries scored by `p_auto`.
    pub max_knns: usize,
    pub lambda: f64,
    pub rng_seed: u64,
}

impl Default for TraversalConfig {
    fn default() -> Self {
        TraversalConfig { tau: Tau::Finite(1), k_neigh: 32, max_knns: 32, lambda: 0.25, rng_seed: 0 }
    }
}

impl TraversalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau == Tau::Finite(0) {
            return Err(Error::invalid("tau must be at least 1"));
        }
        if self.k_neigh == 0 {
            return Err(Error::invalid("k_neigh must be at least 1"));
        }
        if self.max_knns == 0 {
            return Err(Error::invalid("max_knns must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        Ok(())
    }

    pub fn with_tau(self, tau: Tau) -> Self {
        TraversalConfig { tau, ..self }
    }
}

/// Everything a traversal reads. All parts are immutable and shared.
#[derive(Clone, Copy)]
pub struct Model<'a> {
    pub datastore: &'a Datastore,
    pub automaton: &'a Automaton,
    pub index: &'a dyn KnnIndex,
    pub encoder: &'a dyn ContextEncoder,
    pub base_lm: &'a dyn BaseLm,
}

impl<'a> Model<'a> {
    /// Exact search over the datastore.
    pub fn new(
        datastore: &'a Datastore,
        automaton: &'a Automaton,
        encoder: &'a dyn ContextEncoder,
        base_lm: &'a dyn BaseLm,
    ) -> Self {
        Model { datastore, automaton, index: datastore, encoder, base_lm }
    }

    pub fn with_index(self, index: &'a dyn KnnIndex) -> Self {
        Model { index, ..self }
    }

    pub fn vocab_size(&self) -> usize {
        self.base_lm.vocab_size()
    }

    pub(crate) fn check_tokens(&self, tokens: &[TokenId], bos: TokenId) -> Result<()> {
        let vocab_size = self.vocab_size();
        for &id in tokens {
            if id as usize >= vocab_size || id == bos {
                return Err(Error::TokenOutOfRange { id, vocab_size });
            }
        }
        Ok(())
    }
}

/// Derives the per-document session seed so results do not depend on the
/// order in which documents are processed.
pub fn session_seed(base: u64, doc_index: usize) -> u64 {
    base ^ (doc_index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Mutable state of one traversal. Sessions are cheap; evaluation uses one
/// per document.
#[derive(Debug, Clone)]
pub struct TraversalSession {
    current: StateSet,
    search_count: usize,
    step_count: usize,
    run_lengths: Vec<usize>,
    open_run: usize,
    rng: ChaCha8Rng,
    search_only: bool,
}

/// Output of [`TraversalSession::next_distribution`].
#[derive(Debug, Clone, PartialEq)]
pub struct StepDistribution {
    pub probs: Vec<f64>,
    pub active_entries: usize,
}

impl TraversalSession {
    pub fn new(seed: u64) -> Self {
        TraversalSession {
            current: StateSet::default(),
            search_count: 0,
            step_count: 0,
            run_lengths: Vec::new(),
            open_run: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            search_only: false,
        }
    }

    /// Test hook: every step discards the traversal state and restarts from
    /// a fresh search, reducing the model to a plain kNN-LM.
    pub fn set_search_only(&mut self, on: bool) {
        self.search_only = on;
    }

    /// Replaces the active state set, e.g. to continue from a known
    /// position. Counters are left alone.
    pub fn resume(&mut self, states: StateSet) {
        self.current = states;
    }

    pub fn current(&self) -> &StateSet {
        &self.current
    }

    pub fn search_count(&self) -> usize {
        self.search_count
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    /// Covered lengths of the finished no-search runs (see
    /// [`crate::eval::extract_runs`]).
    pub fn run_lengths(&self) -> &[usize] {
        &self.run_lengths
    }

    fn record(&mut self, searched: bool) {
        self.step_count += 1;
        if searched {
            self.search_count += 1;
            if self.open_run > 0 {
                self.run_lengths.push(self.open_run);
            }
            self.open_run = 1;
        } else {
            self.open_run += 1;
        }
    }

    /// Closes the open run.
    pub fn finish(&mut self) {
        if self.open_run > 0 {
            self.run_lengths.push(self.open_run);
            self.open_run = 0;
        }
    }

    /// Begins a traversal from the implicit initial state: one full search,
    /// then an ε-move into the clusters of the retrieved entries. The
    /// retrieved entries are marked preferred.
    pub fn start(&mut self, model: &Model<'_>, query: &[f32], cfg: &TraversalConfig) -> Result<&StateSet> {
        let nbrs = model.index.search(query, cfg.k_neigh)?;
        let entries: Vec<EntryId> = nbrs.indices().collect();
        let states = entries.iter().map(|&e| model.automaton.state_of(e)).collect();
        self.current = StateSet::new(states, entries);
        self.record(true);
        Ok(&self.current)
    }

    /// Consumes `token` and moves to the next state set, searching with
    /// `next_query` when fewer than `τ` successor states remain. Returns
    /// whether a search ran.
    pub fn step(&mut self, model: &Model<'_>, token: TokenId, next_query: &[f32], cfg: &TraversalConfig) -> Result<bool> {
        if self.current.is_empty() || self.search_only {
            self.start(model, next_query, cfg)?;
            return Ok(true);
        }
        let aut = model.automaton;
        let mut next = aut.delta_hat(self.current.states(), token);
        let preferred = aut.pointer_successors(self.current.states(), token);
        let searched = !cfg.tau.allows(next.len());
        if searched {
            let nbrs = model.index.search(next_query, cfg.k_neigh)?;
            next.extend(nbrs.indices().map(|e| aut.state_of(e)));
        }
        self.current = StateSet::new(next, preferred);
        self.record(searched);
        Ok(searched)
    }

    /// Entries scored by `p_auto` this step: preferred entries first, then a
    /// seeded sample of the remaining members, at most `cap` in total.
    pub fn select_active_entries(&mut self, aut: &Automaton, cap: usize) -> Vec<EntryId> {
        select_active_entries(aut, &self.current, cap, &mut self.rng)
    }

    /// `λ·p_auto + (1 - λ)·p_LM` for the current state set.
    pub fn next_distribution(
        &mut self,
        model: &Model<'_>,
        context: &[TokenId],
        query: &[f32],
        cfg: &TraversalConfig,
    ) -> Result<StepDistribution> {
        if self.current.is_empty() {
            return Err(Error::invalid("no active states; call start first"));
        }
        let active = self.select_active_entries(model.automaton, cfg.max_knns);
        let p_auto = p_auto_entries(model.datastore, &active, query, model.vocab_size())?;
        let probs = interpolate(&p_auto, &model.base_lm.prob(context), cfg.lambda)?;
        Ok(StepDistribution { probs, active_entries: active.len() })
    }
}

/// Fills up to `cap` slots with the preferred entries of `states` (lowest
/// index first), then with a uniform sample without replacement of the other
/// members of the states.
pub fn select_active_entries(aut: &Automaton, states: &StateSet, cap: usize, rng: &mut ChaCha8Rng) -> Vec<EntryId> {
    let preferred = states.preferred();
    if preferred.len() >= cap {
        return preferred[..cap].to_vec();
    }
    let room = cap - preferred.len();
    let mut out = preferred.to_vec();
    let is_other = |e: &EntryId| preferred.binary_search(e).is_err();
    let mut offsets = Vec::with_capacity(states.len() + 1);
    offsets.push(0usize);
    for &q in states.states() {
        offsets.push(offsets.last().unwrap() + aut.members(q).len());
    }
    let total = *offsets.last().unwrap();
    if total.saturating_sub(preferred.len()) <= room {
        let mut others: Vec<EntryId> =
            states.states().iter().flat_map(|&q| aut.members(q).iter().copied()).filter(is_other).collect();
        others.sort_unstable();
        out.extend(others);
        return out;
    }
    // A shuffled draw over all members, preferred ones skipped, is a uniform
    // draw over the others.
    let member_at = |i: usize| {
        let s = offsets.partition_point(|&o| o <= i) - 1;
        aut.members(states.states()[s])[i - offsets[s]]
    };
    let mut picked: Vec<EntryId> = sample(rng, total, (room + preferred.len()).min(total))
        .into_iter()
        .map(member_at)
        .filter(is_other)
        .take(room)
        .collect();
    picked.sort_unstable();
    out.extend(picked);
    out
}

/// Per-token evaluation output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenRecord {
    pub position: usize,
    pub gold: TokenId,
    /// Probability assigned to the gold token.
    pub prob: f64,
    pub searched: bool,
    pub num_states: usize,
    pub active_entries: usize,
}

/// Teacher-forced evaluation of one document. Position `t` is scored before
/// the gold token is consumed; transitions consume the gold token.
pub fn run_sequence(
    model: &Model<'_>,
    tokens: &[TokenId],
    bos: TokenId,
    cfg: &TraversalConfig,
    seed: u64,
) -> Result<Vec<TokenRecord>> {
    let mut session = TraversalSession::new(seed);
    run_sequence_with(model, &mut session, tokens, bos, cfg)
}

/// [`run_sequence`] on a caller-provided session.
pub fn run_sequence_with(
    model: &Model<'_>,
    session: &mut TraversalSession,
    tokens: &[TokenId],
    bos: TokenId,
    cfg: &TraversalConfig,
) -> Result<Vec<TokenRecord>> {
    cfg.validate()?;
    if tokens.is_empty() {
        return Err(Error::invalid("empty token sequence"));
    }
    model.check_tokens(tokens, bos)?;
    let mut context = Vec::with_capacity(tokens.len() + 1);
    context.push(bos);
    let mut records = Vec::with_capacity(tokens.len());
    for (t, &gold) in tokens.iter().enumerate() {
        let query = model.encoder.encode(&context);
        let searched = if t == 0 {
            session.start(model, &query, cfg)?;
            true
        } else {
            session.step(model, tokens[t - 1], &query, cfg)?
        };
        let dist = session.next_distribution(model, &context, &query, cfg)?;
        records.push(TokenRecord {
            position: t,
            gold,
            prob: dist.probs[gold as usize],
            searched,
            num_states: session.current().len(),
            active_entries: dist.active_entries,
        });
        context.push(gold);
    }
    session.finish();
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GenerationMode {
    Argmax,
    Sample { temperature: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratedToken {
    pub token: TokenId,
    pub prob: f64,
    /// Whether reaching the state set that produced this token took a search.
    pub searched: bool,
    pub num_states: usize,
}

/// Free-running generation: the prompt is consumed with teacher forcing,
/// then every generated token is fed back as the consumed token.
pub fn generate(
    model: &Model<'_>,
    prompt: &[TokenId],
    length: usize,
    mode: GenerationMode,
    bos: TokenId,
    cfg: &TraversalConfig,
    seed: u64,
) -> Result<Vec<GeneratedToken>> {
    cfg.validate()?;
    model.check_tokens(prompt, bos)?;
    if let GenerationMode::Sample { temperature } = mode {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::invalid("temperature must be positive"));
        }
    }
    if length == 0 {
        return Ok(Vec::new());
    }
    let mut session = TraversalSession::new(seed);
    let mut sampler = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut context = vec![bos];
    session.start(model, &model.encoder.encode(&context), cfg)?;
    let mut searched = true;
    for &tok in prompt {
        context.push(tok);
        searched = session.step(model, tok, &model.encoder.encode(&context), cfg)?;
    }

    let mut out = Vec::with_capacity(length);
    for i in 0..length {
        let query = model.encoder.encode(&context);
        let dist = session.next_distribution(model, &context, &query, cfg)?;
        let token = match mode {
            GenerationMode::Argmax => argmax(&dist.probs),
            GenerationMode::Sample { temperature } => {
                let weights: Vec<f64> = dist.probs.iter().map(|&p| p.powf(1.0 / temperature)).collect();
                WeightedIndex::new(&weights)
                    .map_err(|e| Error::invalid(format!("cannot sample: {e}")))?
                    .sample(&mut sampler) as TokenId
            }
        };
        out.push(GeneratedToken { token, prob: dist.probs[token as usize], searched, num_states: session.current().len() });
        context.push(token);
        if i + 1 < length {
            searched = session.step(model, token, &model.encoder.encode(&context), cfg)?;
        }
    }
    Ok(out)
}

/// Highest-probability token, lowest id on ties.
fn argmax(probs: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best as TokenId
}
