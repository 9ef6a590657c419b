//! Retrieval language modeling over a kNN datastore augmented with an
//! automaton.
//!
//! Every datastore entry keeps a pointer to the entry that followed it in the
//! training text. Entries are clustered into states, and the pointers of a
//! state's members become its outgoing transitions. At inference time the
//! automaton is traversed alongside the text so that most steps can reuse the
//! previous step's neighbors instead of running a fresh nearest-neighbor
//! search.
//!
//! Module map:
//!
//! - [`corpus`]: tokenization, vocabulary, `(context, target)` pairs, n-gram overlap
//! - [`lm`]: the context encoder `f` and the base language model
//! - [`datastore`]: `(key, value, pointer)` entries, exact and IVF search, kNN-LM
//! - [`clustering`]: k-means, greedy merge and singleton state assignment
//! - [`automaton`]: transition tables, dynamic weights and `p_auto`
//! - [`traversal`]: the search-or-traverse inference loop
//! - [`eval`]: perplexity, fraction of saved searches, sweeps and baselines
//! - [`fixture`]: seeded synthetic corpora

pub mod automaton;
pub mod clustering;
pub mod corpus;
pub mod datastore;
mod error;
pub mod eval;
pub mod fixture;
mod io;
pub mod lm;
pub mod traversal;

pub use automaton::{Automaton, StateSet};
pub use clustering::{ClusterAlgo, Clustering};
pub use corpus::{Corpus, Split, TokenizeMode, Vocabulary};
pub use datastore::{Datastore, KeyPrecision, NeighborSet};
pub use error::{Error, Result};
pub use lm::{BaseLm, ContextEncoder, CountLm, DecayEncoder};
pub use traversal::{Tau, TraversalConfig, TraversalSession};

/// Token identifier within a [`Vocabulary`].
pub type TokenId = u32;

/// Index of a datastore entry.
pub type EntryId = u32;

/// Index of an automaton state (a cluster of entries).
pub type StateId = u32;
