//! Weighted automaton over clustered datastore entries.
//!
//! States are clusters. The transition function follows the pointers of a
//! state's members that emit the input token:
//!
//! `δ(q, w) = { π(ρ(p_i)) : (·, w_i, p_i) ∈ π⁻¹(q), w_i = w }`
//!
//! Transitions are precomputed into compressed per-state tables sorted by
//! token. Weights are dynamic: `φ(q, c, w)` sums `exp(-dist(f(c), k_i))` over
//! the members of `q` emitting `w`, so they are evaluated per query rather
//! than stored.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datastore::distance_vote;
use crate::io::{self as aio, eof_as_corrupt};
use crate::{Clustering, Datastore, EntryId, Error, Result, StateId, TokenId, Vocabulary};

const MAGIC: &[u8; 4] = b"RTMA";

#[derive(Debug, Clone, PartialEq)]
pub struct Automaton {
    clustering: Clustering,
    // state q owns edges state_offsets[q]..state_offsets[q + 1]
    state_offsets: Vec<u32>,
    edge_tokens: Vec<TokenId>,
    edge_state_offsets: Vec<u32>,
    succ_states: Vec<StateId>,
    edge_entry_offsets: Vec<u32>,
    succ_entries: Vec<EntryId>,
}

/// One outgoing transition of a state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge<'a> {
    pub token: TokenId,
    pub states: &'a [StateId],
    pub entries: &'a [EntryId],
}

impl Automaton {
    pub fn build(ds: &Datastore, clustering: Clustering) -> Result<Self> {
        if clustering.num_entries() != ds.len() {
            return Err(Error::SizeMismatch(format!(
                "clustering covers {} entries, datastore has {}",
                clustering.num_entries(),
                ds.len()
            )));
        }
        let mut aut = Automaton {
            state_offsets: vec![0],
            edge_tokens: Vec::new(),
            edge_state_offsets: vec![0],
            succ_states: Vec::new(),
            edge_entry_offsets: vec![0],
            succ_entries: Vec::new(),
            clustering,
        };
        let mut arcs: Vec<(TokenId, EntryId)> = Vec::new();
        for q in 0..aut.clustering.num_states() as StateId {
            arcs.clear();
            arcs.extend(aut.clustering.members(q).iter().filter_map(|&e| ds.pointer(e).map(|p| (ds.value(e), p))));
            arcs.sort_unstable();
            for group in arcs.chunk_by(|a, b| a.0 == b.0) {
                aut.edge_tokens.push(group[0].0);
                aut.succ_entries.extend(group.iter().map(|a| a.1));
                let states: BTreeSet<StateId> = group.iter().map(|a| aut.clustering.state_of(a.1)).collect();
                aut.succ_states.extend(states);
                aut.edge_entry_offsets.push(aut.succ_entries.len() as u32);
                aut.edge_state_offsets.push(aut.succ_states.len() as u32);
            }
            aut.state_offsets.push(aut.edge_tokens.len() as u32);
        }
        Ok(aut)
    }

    pub fn clustering(&self) -> &Clustering {
        &self.clustering
    }

    pub fn num_states(&self) -> usize {
        self.clustering.num_states()
    }

    pub fn num_entries(&self) -> usize {
        self.clustering.num_entries()
    }

    pub fn num_edges(&self) -> usize {
        self.edge_tokens.len()
    }

    pub fn state_of(&self, e: EntryId) -> StateId {
        self.clustering.state_of(e)
    }

    pub fn members(&self, q: StateId) -> &[EntryId] {
        self.clustering.members(q)
    }

    fn edge_range(&self, q: StateId) -> Range<usize> {
        self.state_offsets[q as usize] as usize..self.state_offsets[q as usize + 1] as usize
    }

    fn edge(&self, i: usize) -> Edge<'_> {
        let s = self.edge_state_offsets[i] as usize..self.edge_state_offsets[i + 1] as usize;
        let e = self.edge_entry_offsets[i] as usize..self.edge_entry_offsets[i + 1] as usize;
        Edge { token: self.edge_tokens[i], states: &self.succ_states[s], entries: &self.succ_entries[e] }
    }

    fn find_edge(&self, q: StateId, w: TokenId) -> Option<Edge<'_>> {
        let range = self.edge_range(q);
        let at = self.edge_tokens[range.clone()].binary_search(&w).ok()?;
        Some(self.edge(range.start + at))
    }

    /// `δ(q, w)`, sorted and deduplicated.
    pub fn delta(&self, q: StateId, w: TokenId) -> &[StateId] {
        self.find_edge(q, w).map_or(&[], |e| e.states)
    }

    /// Entries reached by dereferencing the pointers of members of `q` with
    /// value `w`.
    pub fn entry_successors(&self, q: StateId, w: TokenId) -> &[EntryId] {
        self.find_edge(q, w).map_or(&[], |e| e.entries)
    }

    pub fn edges(&self, q: StateId) -> impl Iterator<Item = Edge<'_>> + '_ {
        self.edge_range(q).map(move |i| self.edge(i))
    }

    /// `δ̂(S, w) = ∪_{q ∈ S} δ(q, w)`, sorted.
    pub fn delta_hat(&self, states: &[StateId], w: TokenId) -> Vec<StateId> {
        let mut out: Vec<StateId> = states.iter().flat_map(|&q| self.delta(q, w).iter().copied()).collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// `{ ρ(p_i) }` over members of `states` with value `w`, sorted.
    pub fn pointer_successors(&self, states: &[StateId], w: TokenId) -> Vec<EntryId> {
        let mut out: Vec<EntryId> = states.iter().flat_map(|&q| self.entry_successors(q, w).iter().copied()).collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Unnormalized transition weight `φ(q, c, w)` over all members of `q`.
    pub fn phi(&self, ds: &Datastore, q: StateId, query: &[f32], w: TokenId) -> f64 {
        self.members(q)
            .iter()
            .filter(|&&e| ds.value(e) == w)
            .map(|&e| (-ds.sq_dist(e, query)).exp())
            .sum()
    }

    /// `φ(q, c, w)` restricted to the members listed in `active`.
    pub fn phi_active(&self, ds: &Datastore, q: StateId, query: &[f32], w: TokenId, active: &[EntryId]) -> f64 {
        active
            .iter()
            .filter(|&&e| self.state_of(e) == q && ds.value(e) == w)
            .map(|&e| (-ds.sq_dist(e, query)).exp())
            .sum()
    }

    /// `p_auto(w | c, S) ∝ Σ_{q ∈ S} φ(q, c, w)` over every member of `S`.
    pub fn p_auto(&self, ds: &Datastore, states: &StateSet, query: &[f32], vocab_size: usize) -> Result<Vec<f64>> {
        if states.is_empty() {
            return Err(Error::invalid("p_auto over an empty state set"));
        }
        let entries: Vec<EntryId> = states.states().iter().flat_map(|&q| self.members(q).iter().copied()).collect();
        p_auto_entries(ds, &entries, query, vocab_size)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, clustering: Clustering) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?), clustering)
    }

    /// Header `RTMA | version u32 | states u64 | entries u64 | edges u64`,
    /// then the compressed-row tables as u32 arrays: state offsets, edge
    /// tokens, successor-state offsets and ids, successor-entry offsets and
    /// ids. The clustering is stored separately.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        aio::write_header(w, MAGIC)?;
        w.write_u64::<LittleEndian>(self.num_states() as u64)?;
        w.write_u64::<LittleEndian>(self.num_entries() as u64)?;
        w.write_u64::<LittleEndian>(self.num_edges() as u64)?;
        aio::write_u32_slice(w, &self.state_offsets)?;
        aio::write_u32_slice(w, &self.edge_tokens)?;
        aio::write_u32_slice(w, &self.edge_state_offsets)?;
        aio::write_u32_slice(w, &self.succ_states)?;
        aio::write_u32_slice(w, &self.edge_entry_offsets)?;
        aio::write_u32_slice(w, &self.succ_entries)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R, clustering: Clustering) -> Result<Self> {
        aio::read_header(r, MAGIC)?;
        let q = r.read_u64::<LittleEndian>().map_err(eof_as_corrupt)? as usize;
        let n = r.read_u64::<LittleEndian>().map_err(eof_as_corrupt)? as usize;
        let edges = r.read_u64::<LittleEndian>().map_err(eof_as_corrupt)? as usize;
        if q != clustering.num_states() || n != clustering.num_entries() {
            return Err(Error::SizeMismatch("automaton does not match clustering".into()));
        }
        if edges > n {
            return Err(Error::Corrupt("more edges than entries".into()));
        }
        let state_offsets = aio::read_u32_vec(r, q + 1)?;
        check_offsets(&state_offsets, edges)?;
        let edge_tokens = aio::read_u32_vec(r, edges)?;
        let edge_state_offsets = aio::read_u32_vec(r, edges + 1)?;
        let total_states = *edge_state_offsets.last().unwrap() as usize;
        if total_states > n {
            return Err(Error::Corrupt("successor table too large".into()));
        }
        let succ_states = aio::read_u32_vec(r, total_states)?;
        check_offsets(&edge_state_offsets, total_states)?;
        let edge_entry_offsets = aio::read_u32_vec(r, edges + 1)?;
        let total_entries = *edge_entry_offsets.last().unwrap() as usize;
        if total_entries > n {
            return Err(Error::Corrupt("successor table too large".into()));
        }
        let succ_entries = aio::read_u32_vec(r, total_entries)?;
        check_offsets(&edge_entry_offsets, total_entries)?;
        aio::expect_eof(r)?;
        if succ_states.iter().any(|&s| s as usize >= q) || succ_entries.iter().any(|&e| e as usize >= n) {
            return Err(Error::Corrupt("successor id out of range".into()));
        }
        Ok(Automaton {
            clustering,
            state_offsets,
            edge_tokens,
            edge_state_offsets,
            succ_states,
            edge_entry_offsets,
            succ_entries,
        })
    }

    /// Seeded sample of up to `count` distinct states, ascending.
    pub fn sample_states(&self, count: usize, seed: u64) -> Vec<StateId> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked: Vec<StateId> =
            sample(&mut rng, self.num_states(), count.min(self.num_states())).into_iter().map(|q| q as StateId).collect();
        picked.sort_unstable();
        picked
    }

    /// GraphViz dump of `states` and their outgoing transitions. Each node
    /// lists up to `max_members` member values.
    pub fn write_dot<W: Write>(
        &self,
        w: &mut W,
        ds: &Datastore,
        vocab: &Vocabulary,
        states: &[StateId],
        max_members: usize,
    ) -> Result<()> {
        let tok = |id: TokenId| escape(vocab.token(id).unwrap_or("?"));
        writeln!(w, "digraph automaton {{")?;
        writeln!(w, "  node [shape=box];")?;
        for &q in states {
            let members = self.members(q);
            let shown: Vec<String> = members.iter().take(max_members).map(|&e| tok(ds.value(e))).collect();
            let more = if members.len() > max_members { ", ..." } else { "" };
            writeln!(w, "  q{q} [label=\"q{q} ({} entries)\\n{}{more}\"];", members.len(), shown.join(", "))?;
            for edge in self.edges(q) {
                for &next in edge.states {
                    writeln!(w, "  q{q} -> q{next} [label=\"{}\"];", tok(edge.token))?;
                }
            }
        }
        writeln!(w, "}}")?;
        Ok(())
    }
}

fn check_offsets(offsets: &[u32], total: usize) -> Result<()> {
    let monotone = offsets.windows(2).all(|w| w[0] <= w[1]);
    if offsets.first() != Some(&0) || !monotone || *offsets.last().unwrap() as usize != total {
        return Err(Error::Corrupt("malformed offset table".into()));
    }
    Ok(())
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

/// `p_auto` over an explicit list of active entries (the capped form).
pub fn p_auto_entries(ds: &Datastore, entries: &[EntryId], query: &[f32], vocab_size: usize) -> Result<Vec<f64>> {
    if let Some(&e) = entries.iter().find(|&&e| ds.value(e) as usize >= vocab_size) {
        return Err(Error::TokenOutOfRange { id: ds.value(e), vocab_size });
    }
    distance_vote(vocab_size, entries.iter().map(|&e| (ds.value(e), ds.sq_dist(e, query))))
        .ok_or_else(|| Error::invalid("no active entries"))
}

/// The active state set `S^(t)` plus the entries reached directly through
/// pointers at the previous step. The empty set stands for the implicit
/// initial state, which forces a search.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StateSet {
    states: Vec<StateId>,
    preferred: Vec<EntryId>,
}

impl StateSet {
    /// Both lists are sorted and deduplicated.
    pub fn new(mut states: Vec<StateId>, mut preferred: Vec<EntryId>) -> Self {
        states.sort_unstable();
        states.dedup();
        preferred.sort_unstable();
        preferred.dedup();
        StateSet { states, preferred }
    }

    pub fn states(&self) -> &[StateId] {
        &self.states
    }

    pub fn preferred(&self) -> &[EntryId] {
        &self.preferred
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn contains(&self, q: StateId) -> bool {
        self.states.binary_search(&q).is_ok()
    }

    /// Total member count over all states.
    pub fn member_count(&self, aut: &Automaton) -> usize {
        self.states.iter().map(|&q| aut.members(q).len()).sum()
    }
}
