//! The `(K, V, P)` datastore: one entry per training token holding the
//! encoded context, the token that followed it, and a pointer to the entry
//! built from the next position of the same document.
//!
//! Search is exact brute force over squared L2 distance. [`IvfIndex`] is an
//! optional coarse-quantized accelerator over a [`Clustering`].

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use half::f16;
use rayon::prelude::*;

use crate::io::{self as aio, eof_as_corrupt};
use crate::lm::ContextEncoder;
use crate::{Clustering, Corpus, EntryId, Error, Result, TokenId, Vocabulary};

const MAGIC: &[u8; 4] = b"RTMD";
const NO_POINTER: EntryId = EntryId::MAX;
const FILE_NO_POINTER: u64 = u64::MAX;
const VALUE_WIDTH: u8 = std::mem::size_of::<TokenId>() as u8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum KeyPrecision {
    #[default]
    F32,
    F16,
}

impl KeyPrecision {
    fn code(self) -> u8 {
        match self {
            KeyPrecision::F32 => 0,
            KeyPrecision::F16 => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(KeyPrecision::F32),
            1 => Ok(KeyPrecision::F16),
            other => Err(Error::Corrupt(format!("unknown key precision code {other}"))),
        }
    }
}

impl FromStr for KeyPrecision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fp32" | "f32" => Ok(KeyPrecision::F32),
            "fp16" | "f16" => Ok(KeyPrecision::F16),
            other => Err(Error::invalid(format!("unknown key precision {other:?}"))),
        }
    }
}

impl fmt::Display for KeyPrecision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KeyPrecision::F32 => "fp32",
            KeyPrecision::F16 => "fp16",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
enum KeyStore {
    F32(Vec<f32>),
    F16(Vec<f16>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Datastore {
    keys: KeyStore,
    values: Vec<TokenId>,
    pointers: Vec<EntryId>,
    dim: usize,
}

/// A borrowed view of one datastore entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub key: Vec<f32>,
    pub value: TokenId,
    pub pointer: Option<EntryId>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub entry: EntryId,
    /// Squared L2 distance to the query.
    pub distance: f64,
}

/// Retrieved entries sorted by ascending distance, ties by entry index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NeighborSet {
    pub entries: Vec<Neighbor>,
    pub k: usize,
}

impl NeighborSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn indices(&self) -> impl Iterator<Item = EntryId> + '_ {
        self.entries.iter().map(|n| n.entry)
    }
}

impl Datastore {
    /// Encodes every `(context, target)` pair of `corpus`, one entry per
    /// token. Pointers link consecutive positions of a document; the last
    /// entry of each document has none.
    pub fn build<E: ContextEncoder + ?Sized>(corpus: &Corpus, encoder: &E, precision: KeyPrecision) -> Result<Self> {
        let dim = encoder.dim();
        if encoder.vocab_size() < corpus.vocab().len() {
            return Err(Error::SizeMismatch(format!(
                "encoder covers {} tokens but the vocabulary has {}",
                encoder.vocab_size(),
                corpus.vocab().len()
            )));
        }
        let per_doc: Vec<Vec<f32>> = (0..corpus.num_documents())
            .into_par_iter()
            .map(|d| {
                let seq = corpus.bos_prefixed(d);
                let mut keys = Vec::with_capacity((seq.len() - 1) * dim);
                for t in 0..seq.len() - 1 {
                    let key = encoder.encode(&seq[..=t]);
                    if key.len() != dim {
                        return Err(Error::DimensionMismatch { expected: dim, actual: key.len() });
                    }
                    keys.extend_from_slice(&key);
                }
                Ok(keys)
            })
            .collect::<Result<_>>()?;

        let n = corpus.token_count();
        let mut keys = Vec::with_capacity(n * dim);
        let mut values = Vec::with_capacity(n);
        let mut pointers = Vec::with_capacity(n);
        for (d, doc_keys) in per_doc.into_iter().enumerate() {
            keys.extend(doc_keys);
            let doc = corpus.document(d);
            for (t, &w) in doc.iter().enumerate() {
                values.push(w);
                let next = values.len() as EntryId;
                pointers.push((t + 1 < doc.len()).then_some(next));
            }
        }
        Self::from_parts(keys, values, pointers, dim, precision)
    }

    /// Assembles a datastore from raw arrays; fp16 rounds the keys.
    pub fn from_parts(
        keys: Vec<f32>,
        values: Vec<TokenId>,
        pointers: Vec<Option<EntryId>>,
        dim: usize,
        precision: KeyPrecision,
    ) -> Result<Self> {
        let n = values.len();
        if dim == 0 {
            return Err(Error::invalid("key dimension must be positive"));
        }
        if keys.len() != n * dim {
            return Err(Error::DimensionMismatch { expected: n * dim, actual: keys.len() });
        }
        if pointers.len() != n {
            return Err(Error::SizeMismatch(format!("{} pointers for {} entries", pointers.len(), n)));
        }
        if n as u64 >= NO_POINTER as u64 {
            return Err(Error::invalid("too many entries"));
        }
        let pointers = pointers
            .into_iter()
            .map(|p| match p {
                Some(p) if (p as usize) < n => Ok(p),
                Some(p) => Err(Error::Corrupt(format!("pointer {p} out of range"))),
                None => Ok(NO_POINTER),
            })
            .collect::<Result<_>>()?;
        let keys = match precision {
            KeyPrecision::F32 => KeyStore::F32(keys),
            KeyPrecision::F16 => KeyStore::F16(keys.into_iter().map(f16::from_f32).collect()),
        };
        Ok(Datastore { keys, values, pointers, dim })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn precision(&self) -> KeyPrecision {
        match self.keys {
            KeyStore::F32(_) => KeyPrecision::F32,
            KeyStore::F16(_) => KeyPrecision::F16,
        }
    }

    pub fn value(&self, i: EntryId) -> TokenId {
        self.values[i as usize]
    }

    pub fn values(&self) -> &[TokenId] {
        &self.values
    }

    pub fn pointer(&self, i: EntryId) -> Option<EntryId> {
        let p = self.pointers[i as usize];
        (p != NO_POINTER).then_some(p)
    }

    /// Key of entry `i`, upcast to f32.
    pub fn key(&self, i: EntryId) -> Vec<f32> {
        let range = i as usize * self.dim..(i as usize + 1) * self.dim;
        match &self.keys {
            KeyStore::F32(k) => k[range].to_vec(),
            KeyStore::F16(k) => k[range].iter().map(|h| h.to_f32()).collect(),
        }
    }

    pub fn entry(&self, i: EntryId) -> Entry {
        Entry { key: self.key(i), value: self.value(i), pointer: self.pointer(i) }
    }

    /// Squared L2 distance between `query` and the (upcast) key of entry `i`,
    /// accumulated in f64.
    pub fn sq_dist(&self, i: EntryId, query: &[f32]) -> f64 {
        let start = i as usize * self.dim;
        match &self.keys {
            KeyStore::F32(k) => sq_l2(&k[start..start + self.dim], query),
            KeyStore::F16(k) => k[start..start + self.dim]
                .iter()
                .zip(query)
                .map(|(&a, &b)| {
                    let d = a.to_f32() as f64 - b as f64;
                    d * d
                })
                .sum(),
        }
    }

    fn check_query(&self, query: &[f32]) -> Result<()> {
        if self.is_empty() {
            return Err(Error::EmptyDatastore);
        }
        if query.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, actual: query.len() });
        }
        Ok(())
    }

    /// Exact k-nearest neighbors by squared L2 distance.
    pub fn knn_search(&self, query: &[f32], k: usize) -> Result<NeighborSet> {
        self.check_query(query)?;
        if k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        let candidates = (0..self.len() as EntryId).map(|i| (self.sq_dist(i, query), i)).collect();
        Ok(NeighborSet { entries: select_top_k(candidates, k), k })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    /// Header `RTMD | version u32 | N u64 | d u32 | precision u8 | value
    /// width u8`, then row-major keys (f32 or f16), u32 values and u64
    /// pointers with `u64::MAX` for none. Little-endian throughout.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        aio::write_header(w, MAGIC)?;
        w.write_u64::<LittleEndian>(self.len() as u64)?;
        w.write_u32::<LittleEndian>(self.dim as u32)?;
        w.write_u8(self.precision().code())?;
        w.write_u8(VALUE_WIDTH)?;
        match &self.keys {
            KeyStore::F32(k) => aio::write_f32_slice(w, k)?,
            KeyStore::F16(k) => {
                for h in k {
                    w.write_u16::<LittleEndian>(h.to_bits())?;
                }
            }
        }
        aio::write_u32_slice(w, &self.values)?;
        let pointers: Vec<u64> = self
            .pointers
            .iter()
            .map(|&p| if p == NO_POINTER { FILE_NO_POINTER } else { p as u64 })
            .collect();
        aio::write_u64_slice(w, &pointers)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        aio::read_header(r, MAGIC)?;
        let n = r.read_u64::<LittleEndian>().map_err(eof_as_corrupt)? as usize;
        let dim = r.read_u32::<LittleEndian>().map_err(eof_as_corrupt)? as usize;
        let precision = KeyPrecision::from_code(r.read_u8().map_err(eof_as_corrupt)?)?;
        let width = r.read_u8().map_err(eof_as_corrupt)?;
        if width != VALUE_WIDTH {
            return Err(Error::Corrupt(format!("unsupported value width {width}")));
        }
        let keys = match precision {
            KeyPrecision::F32 => KeyStore::F32(aio::read_f32_vec(r, n * dim)?),
            KeyPrecision::F16 => {
                let mut bits = vec![0u16; n * dim];
                r.read_u16_into::<LittleEndian>(&mut bits).map_err(eof_as_corrupt)?;
                KeyStore::F16(bits.into_iter().map(f16::from_bits).collect())
            }
        };
        let values = aio::read_u32_vec(r, n)?;
        let pointers = aio::read_u64_vec(r, n)?
            .into_iter()
            .map(|p| match p {
                FILE_NO_POINTER => Ok(NO_POINTER),
                p if (p as usize) < n => Ok(p as EntryId),
                p => Err(Error::Corrupt(format!("pointer {p} out of range"))),
            })
            .collect::<Result<_>>()?;
        aio::expect_eof(r)?;
        if dim == 0 {
            return Err(Error::Corrupt("zero key dimension".into()));
        }
        Ok(Datastore { keys, values, pointers, dim })
    }

    /// Debug export: `index,value,pointer,key` with space-separated key
    /// components. Values are rendered as token strings when a vocabulary is
    /// given.
    pub fn write_entries_csv<W: Write>(&self, w: W, vocab: Option<&Vocabulary>) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["index", "value", "pointer", "key"])?;
        for i in 0..self.len() as EntryId {
            let value = match vocab.and_then(|v| v.token(self.value(i))) {
                Some(tok) => tok.to_owned(),
                None => self.value(i).to_string(),
            };
            let pointer = self.pointer(i).map(|p| p.to_string()).unwrap_or_default();
            let key = self.key(i).iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
            out.write_record([i.to_string(), value, pointer, key])?;
        }
        out.flush()?;
        Ok(())
    }
}

pub(crate) fn sq_l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Keeps the `k` smallest `(distance, index)` pairs in ascending order.
fn select_top_k(mut candidates: Vec<(f64, EntryId)>, k: usize) -> Vec<Neighbor> {
    let cmp = |a: &(f64, EntryId), b: &(f64, EntryId)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < candidates.len() {
        candidates.select_nth_unstable_by(k - 1, cmp);
        candidates.truncate(k);
    }
    candidates.sort_unstable_by(cmp);
    candidates.into_iter().map(|(distance, entry)| Neighbor { entry, distance }).collect()
}

/// Anything that can answer k-nearest-neighbor queries over a datastore.
pub trait KnnIndex: Sync {
    fn search(&self, query: &[f32], k: usize) -> Result<NeighborSet>;
}

impl KnnIndex for Datastore {
    fn search(&self, query: &[f32], k: usize) -> Result<NeighborSet> {
        self.knn_search(query, k)
    }
}

/// Inverted-file index: exact search restricted to the `nprobe` clusters
/// whose centroids are closest to the query.
#[derive(Debug, Clone)]
pub struct IvfIndex<'a> {
    ds: &'a Datastore,
    centroids: Vec<f32>,
    lists: Vec<Vec<EntryId>>,
    nprobe: usize,
}

impl<'a> IvfIndex<'a> {
    /// Uses the clustering's centroids when present, otherwise member means.
    pub fn new(ds: &'a Datastore, clustering: &Clustering, nprobe: usize) -> Result<Self> {
        if nprobe == 0 {
            return Err(Error::invalid("nprobe must be at least 1"));
        }
        if clustering.num_entries() != ds.len() {
            return Err(Error::SizeMismatch(format!(
                "clustering covers {} entries, datastore has {}",
                clustering.num_entries(),
                ds.len()
            )));
        }
        let centroids = match clustering.centroids() {
            Some(c) => c.to_vec(),
            None => clustering.member_means(ds),
        };
        let lists = (0..clustering.num_states()).map(|q| clustering.members(q as u32).to_vec()).collect();
        Ok(IvfIndex { ds, centroids, lists, nprobe })
    }

    pub fn nprobe(&self) -> usize {
        self.nprobe
    }
}

impl KnnIndex for IvfIndex<'_> {
    fn search(&self, query: &[f32], k: usize) -> Result<NeighborSet> {
        self.ds.check_query(query)?;
        if k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        let dim = self.ds.dim();
        let mut order: Vec<(f64, usize)> = self
            .centroids
            .chunks_exact(dim)
            .enumerate()
            .map(|(c, centroid)| (sq_l2(centroid, query), c))
            .collect();
        order.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let candidates = order
            .iter()
            .take(self.nprobe)
            .flat_map(|&(_, c)| self.lists[c].iter().map(|&i| (self.ds.sq_dist(i, query), i)))
            .collect();
        Ok(NeighborSet { entries: select_top_k(candidates, k), k })
    }
}

/// Free-function form of [`IvfIndex::search`].
pub fn knn_search_ivf(ds: &Datastore, clustering: &Clustering, query: &[f32], k: usize, nprobe: usize) -> Result<NeighborSet> {
    IvfIndex::new(ds, clustering, nprobe)?.search(query, k)
}

/// `p(w) ∝ Σ exp(-distance)` over `(value, distance)` pairs. Distances are
/// shifted by their minimum before exponentiating; the shift cancels in the
/// normalization. Returns `None` for an empty input.
pub(crate) fn distance_vote<I>(vocab_size: usize, votes: I) -> Option<Vec<f64>>
where
    I: IntoIterator<Item = (TokenId, f64)>,
    I::IntoIter: Clone,
{
    let votes = votes.into_iter();
    let min = votes.clone().map(|(_, d)| d).min_by(f64::total_cmp)?;
    let mut probs = vec![0f64; vocab_size];
    for (w, d) in votes {
        probs[w as usize] += (min - d).exp();
    }
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    Some(probs)
}

/// The kNN distribution: `p_kNN(w) ∝ Σ_{neighbors with value w} exp(-dist)`.
pub fn p_knn(ds: &Datastore, neighbors: &NeighborSet, vocab_size: usize) -> Result<Vec<f64>> {
    if let Some(n) = neighbors.entries.iter().find(|n| ds.value(n.entry) as usize >= vocab_size) {
        return Err(Error::TokenOutOfRange { id: ds.value(n.entry), vocab_size });
    }
    distance_vote(vocab_size, neighbors.entries.iter().map(|n| (ds.value(n.entry), n.distance)))
        .ok_or_else(|| Error::invalid("empty neighbor set"))
}

/// `λ·p_retrieval + (1 - λ)·p_lm`, elementwise.
pub fn interpolate(p_retrieval: &[f64], p_lm: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    if p_retrieval.len() != p_lm.len() {
        return Err(Error::DimensionMismatch { expected: p_lm.len(), actual: p_retrieval.len() });
    }
    Ok(p_retrieval.iter().zip(p_lm).map(|(&r, &l)| lambda * r + (1.0 - lambda) * l).collect())
}
