//! Assignment of datastore entries to automaton states.
//!
//! Three algorithms are provided: Lloyd's k-means with k-means++ seeding, a
//! greedy single-pass merge over precomputed nearest neighbors, and the
//! trivial singleton clustering (every entry is its own state, i.e. the
//! automaton uses pointers only).
//!
//! States are always labelled in order of their lowest member entry, so two
//! clusterings that induce the same partition compare equal.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::datastore::sq_l2;
use crate::io::{self as aio, eof_as_corrupt};
use crate::{Datastore, EntryId, Error, Result, StateId};

const MAGIC: &[u8; 4] = b"RTMC";
const UNASSIGNED: StateId = StateId::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    assignment: Vec<StateId>,
    members: Vec<Vec<EntryId>>,
    centroids: Option<Vec<f32>>,
    dim: usize,
}

impl Clustering {
    /// Validates `assignment` and builds the inverse index. States are
    /// relabelled by lowest member; `centroids` (one row per input state) are
    /// permuted to match.
    pub fn from_assignment(assignment: Vec<StateId>, centroids: Option<Vec<f32>>, dim: usize) -> Result<Self> {
        let k = assignment.iter().map(|&s| s as usize + 1).max().unwrap_or(0);
        if let Some(c) = &centroids {
            if c.len() != k * dim {
                return Err(Error::DimensionMismatch { expected: k * dim, actual: c.len() });
            }
        }
        let mut relabel = vec![UNASSIGNED; k];
        let mut next = 0;
        for &s in &assignment {
            if s == UNASSIGNED {
                return Err(Error::invalid("unassigned entry"));
            }
            if relabel[s as usize] == UNASSIGNED {
                relabel[s as usize] = next;
                next += 1;
            }
        }
        if (next as usize) != k {
            return Err(Error::invalid("clustering has an empty state"));
        }
        let assignment: Vec<StateId> = assignment.iter().map(|&s| relabel[s as usize]).collect();
        let mut members = vec![Vec::new(); k];
        for (i, &s) in assignment.iter().enumerate() {
            members[s as usize].push(i as EntryId);
        }
        let centroids = centroids.map(|c| {
            let mut out = vec![0f32; c.len()];
            for (old, &new) in relabel.iter().enumerate() {
                out[new as usize * dim..(new as usize + 1) * dim].copy_from_slice(&c[old * dim..(old + 1) * dim]);
            }
            out
        });
        Ok(Clustering { assignment, members, centroids, dim })
    }

    pub fn num_states(&self) -> usize {
        self.members.len()
    }

    pub fn num_entries(&self) -> usize {
        self.assignment.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `π`: the state containing entry `i`.
    pub fn state_of(&self, i: EntryId) -> StateId {
        self.assignment[i as usize]
    }

    pub fn assignment(&self) -> &[StateId] {
        &self.assignment
    }

    /// `π⁻¹`: the entries of state `q`, ascending.
    pub fn members(&self, q: StateId) -> &[EntryId] {
        &self.members[q as usize]
    }

    /// Row-major `k_clust × d` centroid matrix (k-means only).
    pub fn centroids(&self) -> Option<&[f32]> {
        self.centroids.as_deref()
    }

    pub fn average_size(&self) -> f64 {
        self.num_entries() as f64 / self.num_states() as f64
    }

    /// Mean key of every state, row-major.
    pub fn member_means(&self, ds: &Datastore) -> Vec<f32> {
        let dim = ds.dim();
        let mut out = Vec::with_capacity(self.num_states() * dim);
        for members in &self.members {
            let mut acc = vec![0f64; dim];
            for &e in members {
                for (a, x) in acc.iter_mut().zip(ds.key(e)) {
                    *a += x as f64;
                }
            }
            out.extend(acc.iter().map(|a| (a / members.len() as f64) as f32));
        }
        out
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

    /// Header `RTMC | version u32 | N u64 | k_clust u64 | d u32 | has
    /// centroids u8`, then N u32 state ids and, when flagged, the f32
    /// centroid matrix.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        aio::write_header(w, MAGIC)?;
        w.write_u64::<LittleEndian>(self.num_entries() as u64)?;
        w.write_u64::<LittleEndian>(self.num_states() as u64)?;
        w.write_u32::<LittleEndian>(self.dim as u32)?;
        w.write_u8(self.centroids.is_some() as u8)?;
        aio::write_u32_slice(w, &self.assignment)?;
        if let Some(c) = &self.centroids {
            aio::write_f32_slice(w, c)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        aio::read_header(r, MAGIC)?;
        let n = r.read_u64::<LittleEndian>().map_err(eof_as_corrupt)? as usize;
        let k = r.read_u64::<LittleEndian>().map_err(eof_as_corrupt)? as usize;
        let dim = r.read_u32::<LittleEndian>().map_err(eof_as_corrupt)? as usize;
        let has_centroids = match r.read_u8().map_err(eof_as_corrupt)? {
            0 => false,
            1 => true,
            other => return Err(Error::Corrupt(format!("bad centroid flag {other}"))),
        };
        let assignment = aio::read_u32_vec(r, n)?;
        if assignment.iter().any(|&s| s as usize >= k) {
            return Err(Error::Corrupt("state id out of range".into()));
        }
        let centroids = if has_centroids { Some(aio::read_f32_vec(r, k * dim)?) } else { None };
        aio::expect_eof(r)?;
        let clustering = Self::from_assignment(assignment, centroids, dim).map_err(|e| Error::Corrupt(e.to_string()))?;
        if clustering.num_states() != k {
            return Err(Error::Corrupt("state count mismatch".into()));
        }
        Ok(clustering)
    }
}

/// Clustering algorithm with its parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClusterAlgo {
    KMeans { k_clust: usize, max_iters: usize, seed: u64 },
    Greedy { neighbor_k: usize, merge_threshold: f64 },
    Singleton,
}

impl ClusterAlgo {
    pub fn run(&self, ds: &Datastore) -> Result<Clustering> {
        match *self {
            ClusterAlgo::KMeans { k_clust, max_iters, seed } => kmeans(ds, k_clust, max_iters, seed),
            ClusterAlgo::Greedy { neighbor_k, merge_threshold } => greedy_cluster(ds, neighbor_k, merge_threshold),
            ClusterAlgo::Singleton => Ok(singleton_clustering(ds)),
        }
    }
}

/// Entry `i` is state `i`.
pub fn singleton_clustering(ds: &Datastore) -> Clustering {
    Clustering {
        assignment: (0..ds.len() as StateId).collect(),
        members: (0..ds.len() as EntryId).map(|i| vec![i]).collect(),
        centroids: None,
        dim: ds.dim(),
    }
}

/// Output of [`kmeans_with_trace`].
#[derive(Debug, Clone)]
pub struct KMeansRun {
    pub clustering: Clustering,
    /// Within-cluster SSE after each centroid update.
    pub sse_trace: Vec<f64>,
    pub converged: bool,
}

pub fn kmeans(ds: &Datastore, k_clust: usize, max_iters: usize, seed: u64) -> Result<Clustering> {
    Ok(kmeans_with_trace(ds, k_clust, max_iters, seed)?.clustering)
}

/// Lloyd's algorithm from a seeded k-means++ start. Stops after `max_iters`
/// centroid updates or when an assignment pass changes nothing. Ties go to
/// the lowest centroid index. A cluster left empty by an assignment pass
/// takes the member of the largest cluster farthest from that cluster's
/// centroid.
pub fn kmeans_with_trace(ds: &Datastore, k_clust: usize, max_iters: usize, seed: u64) -> Result<KMeansRun> {
    let n = ds.len();
    if k_clust == 0 {
        return Err(Error::invalid("k_clust must be at least 1"));
    }
    if k_clust > n {
        return Err(Error::invalid(format!("k_clust {k_clust} exceeds datastore size {n}")));
    }
    let dim = ds.dim();
    let points: Vec<f32> = (0..n as EntryId).flat_map(|i| ds.key(i)).collect();
    let mut centroids = kmeans_pp(&points, dim, k_clust, seed);
    let mut assignment = assign(&points, &centroids, dim);
    repair_empty(&mut assignment, &points, &mut centroids, dim);

    let mut sse_trace = Vec::new();
    let mut converged = false;
    for _ in 0..max_iters {
        centroids = means(&points, &assignment, k_clust, dim);
        sse_trace.push(sse(&points, &assignment, &centroids, dim));
        let mut next = assign(&points, &centroids, dim);
        repair_empty(&mut next, &points, &mut centroids, dim);
        if next == assignment {
            converged = true;
            break;
        }
        assignment = next;
    }
    centroids = means(&points, &assignment, k_clust, dim);
    let clustering = Clustering::from_assignment(assignment, Some(centroids), dim)?;
    Ok(KMeansRun { clustering, sse_trace, converged })
}

fn kmeans_pp(points: &[f32], dim: usize, k: usize, seed: u64) -> Vec<f32> {
    let n = points.len() / dim;
    let point = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![false; n];
    let first = rng.gen_range(0..n);
    chosen[first] = true;
    let mut centroids = point(first).to_vec();
    let mut d2: Vec<f64> = (0..n).map(|i| sq_l2(point(i), point(first))).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 {
                    pick = Some(i);
                    acc += d;
                    if acc > target {
                        break;
                    }
                }
            }
            pick.expect("positive total implies a positive weight")
        } else {
            // every remaining point coincides with a centroid
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.gen_range(0..free.len())]
        };
        chosen[pick] = true;
        centroids.extend_from_slice(point(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_l2(point(i), point(pick)));
        }
    }
    centroids
}

fn nearest(p: &[f32], centroids: &[f32], dim: usize) -> (StateId, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_l2(p, centroid);
        if d < best.1 {
            best = (c as StateId, d);
        }
    }
    best
}

fn assign(points: &[f32], centroids: &[f32], dim: usize) -> Vec<StateId> {
    points.par_chunks_exact(dim).map(|p| nearest(p, centroids, dim).0).collect()
}

fn repair_empty(assignment: &mut [StateId], points: &[f32], centroids: &mut [f32], dim: usize) {
    let k = centroids.len() / dim;
    let mut counts = vec![0usize; k];
    for &s in assignment.iter() {
        counts[s as usize] += 1;
    }
    for empty in 0..k {
        if counts[empty] > 0 {
            continue;
        }
        let largest = (0..k).max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a))).unwrap();
        let centroid = centroids[largest * dim..(largest + 1) * dim].to_vec();
        let mut far = (usize::MAX, f64::NEG_INFINITY);
        for (i, &s) in assignment.iter().enumerate() {
            if s as usize == largest {
                let d = sq_l2(&points[i * dim..(i + 1) * dim], &centroid);
                if d > far.1 {
                    far = (i, d);
                }
            }
        }
        let i = far.0;
        assignment[i] = empty as StateId;
        counts[largest] -= 1;
        counts[empty] += 1;
        centroids[empty * dim..(empty + 1) * dim].copy_from_slice(&points[i * dim..(i + 1) * dim]);
    }
}

fn means(points: &[f32], assignment: &[StateId], k: usize, dim: usize) -> Vec<f32> {
    let mut acc = vec![0f64; k * dim];
    let mut counts = vec![0usize; k];
    for (p, &s) in points.chunks_exact(dim).zip(assignment) {
        counts[s as usize] += 1;
        for (a, &x) in acc[s as usize * dim..(s as usize + 1) * dim].iter_mut().zip(p) {
            *a += x as f64;
        }
    }
    acc.chunks_exact(dim)
        .zip(&counts)
        .flat_map(|(row, &c)| row.iter().map(move |a| (a / c.max(1) as f64) as f32))
        .collect()
}

fn sse(points: &[f32], assignment: &[StateId], centroids: &[f32], dim: usize) -> f64 {
    points
        .chunks_exact(dim)
        .zip(assignment)
        .map(|(p, &s)| sq_l2(p, &centroids[s as usize * dim..(s as usize + 1) * dim]))
        .sum()
}

/// Greedy single-pass merge. Each entry's `neighbor_k` nearest neighbors
/// (excluding itself) are precomputed; entries are then scanned in index
/// order, and an unassigned entry opens a new state that absorbs those of its
/// neighbors that are still unassigned and within squared distance
/// `merge_threshold`.
pub fn greedy_cluster(ds: &Datastore, neighbor_k: usize, merge_threshold: f64) -> Result<Clustering> {
    if neighbor_k == 0 {
        return Err(Error::invalid("neighbor_k must be at least 1"));
    }
    if ds.is_empty() {
        return Err(Error::EmptyDatastore);
    }
    let n = ds.len();
    let lists: Vec<Vec<(EntryId, f64)>> = (0..n as EntryId)
        .into_par_iter()
        .map(|i| {
            let found = ds.knn_search(&ds.key(i), (neighbor_k + 1).min(n))?;
            Ok(found
                .entries
                .iter()
                .filter(|nb| nb.entry != i)
                .take(neighbor_k)
                .map(|nb| (nb.entry, nb.distance))
                .collect())
        })
        .collect::<Result<_>>()?;

    let mut assignment = vec![UNASSIGNED; n];
    let mut next_state: StateId = 0;
    for i in 0..n {
        if assignment[i] != UNASSIGNED {
            continue;
        }
        assignment[i] = next_state;
        for &(e, d) in &lists[i] {
            if d <= merge_threshold && assignment[e as usize] == UNASSIGNED {
                assignment[e as usize] = next_state;
            }
        }
        next_state += 1;
    }
    Clustering::from_assignment(assignment, None, ds.dim())
}
