//! Acceptance gate: one check per criterion, each printed as a PASS/FAIL
//! line. Oracles are written here from the definitions, independently of the
//! library code they check.
//!
//! Run with `cargo test -p automaton-lm-cli --test acceptance`.

use std::collections::{BTreeMap, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use anyhow::{ensure, Context, Result};
use automaton_lm::clustering::{kmeans, kmeans_with_trace, singleton_clustering};
use automaton_lm::corpus::ngram_overlap;
use automaton_lm::datastore::p_knn;
use automaton_lm::eval::{baseline_knnlm, evaluate, knnlm_distribution, sweep_tau};
use automaton_lm::traversal::{generate, run_sequence, GenerationMode, Model, TraversalSession};
use automaton_lm::{
    Automaton, Clustering, ContextEncoder, Corpus, Datastore, EntryId, KeyPrecision, StateId, StateSet, Tau, TokenId, TokenizeMode,
    TraversalConfig,
};
use automaton_lm_cli::config::RunConfig;
use automaton_lm_cli::pipeline::{self, Artifacts};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn config(name: &str) -> RunConfig {
    RunConfig::load(&root().join("configs").join(format!("{name}.toml"))).expect("checked-in config")
}

fn random_datastore(rng: &mut ChaCha8Rng, n: usize, dim: usize, vocab: u32) -> Datastore {
    // a few exact duplicates exercise tie-breaking
    let mut keys: Vec<f32> = (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    for _ in 0..n / 10 {
        let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
        let src = keys[a * dim..(a + 1) * dim].to_vec();
        keys[b * dim..(b + 1) * dim].copy_from_slice(&src);
    }
    let values = (0..n).map(|_| rng.gen_range(1..vocab)).collect();
    Datastore::from_parts(keys, values, vec![None; n], dim, KeyPrecision::F32).unwrap()
}

/// `(distance, index)` of the `k` nearest entries, straight from the
/// definition: full sort by distance, then index.
fn oracle_knn(ds: &Datastore, query: &[f32], k: usize) -> Vec<(f64, EntryId)> {
    let mut all: Vec<(f64, EntryId)> = (0..ds.len() as EntryId)
        .map(|i| {
            let d = ds.key(i).iter().zip(query).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
            (d, i)
        })
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.truncate(k);
    all
}

fn random_query(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn c1_knn_oracle() -> Result<String> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut queries = 0;
    for _ in 0..50 {
        let n = rng.gen_range(1..=5000);
        let dim = rng.gen_range(1..=32);
        let ds = random_datastore(&mut rng, n, dim, 50);
        for _ in 0..4 {
            let q = if rng.gen_bool(0.25) { ds.key(rng.gen_range(0..n as EntryId)) } else { random_query(&mut rng, dim) };
            let k = rng.gen_range(1..=n.min(64));
            let got = ds.knn_search(&q, k)?;
            let want = oracle_knn(&ds, &q, k);
            let got_idx: Vec<EntryId> = got.indices().collect();
            let want_idx: Vec<EntryId> = want.iter().map(|w| w.1).collect();
            ensure!(got_idx == want_idx, "n={n} d={dim} k={k}: {got_idx:?} != {want_idx:?}");
            for (g, w) in got.entries.iter().zip(&want) {
                ensure!((g.distance - w.0).abs() <= 1e-6 * w.0.max(1e-12), "distance {} vs {}", g.distance, w.0);
            }
            queries += 1;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    ensure!(secs < 30.0, "took {secs:.1}s");
    Ok(format!("50 datastores, {queries} queries, exact match, {secs:.2}s"))
}

fn c2_bridge() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let vocab = 12;
    let ds = random_datastore(&mut rng, 400, 8, vocab);
    let aut = Automaton::build(&ds, singleton_clustering(&ds))?;
    let mut worst = 0f64;
    for _ in 0..100 {
        let q = random_query(&mut rng, 8);
        let nbrs = ds.knn_search(&q, rng.gen_range(1..=40))?;
        let states: Vec<StateId> = nbrs.indices().map(|e| aut.state_of(e)).collect();
        let p_auto = aut.p_auto(&ds, &StateSet::new(states, vec![]), &q, vocab as usize)?;
        let p = p_knn(&ds, &nbrs, vocab as usize)?;
        for (a, b) in p_auto.iter().zip(&p) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure!(worst <= 1e-9, "max deviation {worst:e}");
    Ok(format!("100 queries, max deviation {worst:.1e}"))
}

fn c3_knnlm_reduction() -> Result<String> {
    let cfg = config("repetitive");
    let art = Artifacts::build(&cfg)?;
    let tcfg = cfg.traversal_config(Tau::Infinite);
    ensure!(tcfg.max_knns >= tcfg.k_neigh, "cap below k_neigh");
    let bos = art.valid.vocab().bos_id();
    let (worst, tokens) = art.with_model(&cfg, |model| {
        let baseline = baseline_knnlm(model, &art.valid, 0.0, &tcfg)?;
        let mut worst = 0f64;
        let mut tokens = 0;
        for (d, doc) in art.valid.documents().enumerate() {
            let mut session = TraversalSession::new(d as u64);
            session.set_search_only(true);
            let mut ctx = vec![bos];
            for (t, &gold) in doc.iter().enumerate() {
                let query = model.encoder.encode(&ctx);
                if t == 0 {
                    session.start(model, &query, &tcfg)?;
                } else {
                    ensure!(session.step(model, doc[t - 1], &query, &tcfg)?, "search-only step skipped a search");
                }
                let ours = session.next_distribution(model, &ctx, &query, &tcfg)?.probs;
                let theirs = knnlm_distribution(model, &ctx, &query, tcfg.k_neigh, tcfg.lambda)?;
                for (a, b) in ours.iter().zip(&theirs) {
                    worst = worst.max((a - b).abs());
                }
                worst = worst.max((ours[gold as usize] - baseline.records[d][t].prob).abs());
                ctx.push(gold);
                tokens += 1;
            }
        }
        Ok((worst, tokens))
    })?;
    ensure!(worst <= 1e-9, "max deviation {worst:e}");
    Ok(format!("{tokens} tokens, max deviation {worst:.1e}"))
}

/// Twenty entries in five documents over tokens 1..=4, clustered by hand so
/// that several states have mixed members.
fn handcrafted() -> (Datastore, Clustering) {
    let docs: [&[TokenId]; 5] = [&[1, 2, 3, 4, 1], &[2, 3, 1], &[1, 1, 2, 4], &[3, 4, 2, 1, 3], &[4, 2, 3]];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut keys, mut values, mut pointers) = (Vec::new(), Vec::new(), Vec::new());
    for doc in docs {
        for (t, &w) in doc.iter().enumerate() {
            keys.extend([rng.gen_range(-1.0f32..1.0), rng.gen_range(-1.0f32..1.0)]);
            values.push(w);
            let next = values.len() as EntryId;
            pointers.push((t + 1 < doc.len()).then_some(next));
        }
    }
    assert_eq!(values.len(), 20);
    let ds = Datastore::from_parts(keys, values, pointers, 2, KeyPrecision::F32).unwrap();
    let assignment = vec![0, 1, 2, 3, 0, 1, 2, 4, 3, 0, 5, 6, 7, 4, 5, 1, 6, 7, 2, 5];
    let c = Clustering::from_assignment(assignment, None, 2).unwrap();
    (ds, c)
}

fn c4_restart_rule() -> Result<String> {
    let (ds, c) = handcrafted();
    let aut = Automaton::build(&ds, c.clone())?;
    let lm = UniformLm(5);
    let enc = NullEncoder;
    let model = Model::new(&ds, &aut, &enc, &lm);
    let k = 3;
    let mut checked = 0;
    let num_states = c.num_states();
    for mask in 1u32..(1 << num_states) {
        let current: Vec<StateId> = (0..num_states as StateId).filter(|q| mask & (1 << q) != 0).collect();
        for w in 1..=4 {
            // naive δ̂ and pointer successors straight from the pointers
            let mut t_states = Vec::new();
            let mut preferred = Vec::new();
            for &q in &current {
                for &e in c.members(q) {
                    if ds.value(e) == w {
                        if let Some(p) = ds.pointer(e) {
                            t_states.push(c.state_of(p));
                            preferred.push(p);
                        }
                    }
                }
            }
            t_states.sort_unstable();
            t_states.dedup();
            preferred.sort_unstable();
            for pos in 0..ds.len() as EntryId {
                let query = ds.key(pos);
                for tau in [Tau::Finite(1), Tau::Finite(2), Tau::Finite(3), Tau::Infinite] {
                    let expect_search = match tau {
                        Tau::Finite(t) => t_states.len() < t,
                        Tau::Infinite => true,
                    };
                    let mut expect = t_states.clone();
                    if expect_search {
                        expect.extend(oracle_knn(&ds, &query, k).iter().map(|n| c.state_of(n.1)));
                        expect.sort_unstable();
                        expect.dedup();
                    }
                    let tcfg = TraversalConfig { tau, k_neigh: k, max_knns: 20, lambda: 0.5, rng_seed: 0 };
                    let mut s = TraversalSession::new(0);
                    s.resume(StateSet::new(current.clone(), vec![]));
                    let searched = s.step(&model, w, &query, &tcfg)?;
                    ensure!(searched == expect_search, "search flag: S={current:?} w={w} tau={tau}");
                    ensure!(s.current().states() == expect, "states: S={current:?} w={w} tau={tau}");
                    ensure!(s.current().preferred() == preferred, "preferred: S={current:?} w={w}");
                    checked += 1;
                }
            }
        }
    }
    Ok(format!("{checked} steps over all {} state subsets", (1u32 << num_states) - 1))
}

struct UniformLm(usize);

impl automaton_lm::BaseLm for UniformLm {
    fn vocab_size(&self) -> usize {
        self.0
    }

    fn prob(&self, _: &[TokenId]) -> Vec<f64> {
        vec![1.0 / self.0 as f64; self.0]
    }
}

struct NullEncoder;

impl automaton_lm::ContextEncoder for NullEncoder {
    fn dim(&self) -> usize {
        2
    }

    fn vocab_size(&self) -> usize {
        5
    }

    fn encode(&self, _: &[TokenId]) -> Vec<f32> {
        vec![0.0, 0.0]
    }
}

fn c5_extremes() -> Result<String> {
    let mut cfg = config("repetitive");
    let art = Artifacts::build(&cfg)?;
    let taus = cfg.taus()?;
    art.with_model(&cfg, |model| {
        let r = evaluate(model, &art.valid, &cfg.traversal_config(Tau::Infinite))?.result;
        ensure!(r.foss == 0.0 && r.searches == r.tokens, "tau=inf foss {}", r.foss);
        Ok(())
    })?;
    cfg.traversal.lambda = 0.0;
    let ppl = art.with_model(&cfg, |model| {
        let mut ppl: Vec<f64> = sweep_tau(model, &art.valid, &taus, &cfg.traversal_config(Tau::Infinite))?
            .into_iter()
            .map(|p| p.result.perplexity)
            .collect();
        for &r in &cfg.eval.skip_fractions {
            ppl.push(baseline_knnlm(model, &art.valid, r, &cfg.traversal_config(Tau::Infinite))?.result.perplexity);
        }
        Ok(ppl)
    })?;
    ensure!(ppl.iter().all(|&p| p == ppl[0]), "lambda=0 perplexities differ: {ppl:?}");
    Ok(format!("tau=inf foss 0; lambda=0 perplexity {:.6} across {} runs", ppl[0], ppl.len()))
}

fn c6_verbatim_chain() -> Result<String> {
    let started = Instant::now();
    let cfg = config("repetitive_singleton");
    let art = Artifacts::build(&cfg)?;
    ensure!(art.valid.token_count() >= 200, "validation too short");
    let (r, base) = art.with_model(&cfg, |model| {
        let r = evaluate(model, &art.valid, &cfg.traversal_config(Tau::Finite(1)))?.result;
        let base = baseline_knnlm(model, &art.valid, 1.0, &cfg.traversal_config(Tau::Finite(1)))?.result;
        Ok((r, base))
    })?;
    let secs = started.elapsed().as_secs_f64();
    ensure!(r.foss >= 0.9, "foss {:.3}", r.foss);
    ensure!(r.perplexity < base.perplexity, "perplexity {:.3} vs base {:.3}", r.perplexity, base.perplexity);
    ensure!(secs < 10.0, "took {secs:.1}s");
    Ok(format!(
        "foss {:.3}, perplexity {:.3} < base {:.3}, {} tokens, {secs:.2}s",
        r.foss, r.perplexity, base.perplexity, r.tokens
    ))
}

fn c7_cross_sentence() -> Result<String> {
    let cfg = config("shared_prefix");
    let built = Artifacts::build(&cfg)?;
    let ds = &built.datastore;
    let vocab = built.train.vocab().clone();
    let id = |w: &str| vocab.id(w).unwrap();
    // entries whose context ends in "is" are the pointer targets of the "is" entries
    let is_ctx: Vec<EntryId> =
        (0..ds.len() as EntryId).filter(|&e| ds.value(e) == id("is")).filter_map(|e| ds.pointer(e)).collect();
    ensure!(is_ctx.len() == 2, "expected two is-context entries, found {is_ctx:?}");
    let mut assignment: Vec<StateId> = (0..ds.len() as StateId).collect();
    assignment[is_ctx[1] as usize] = is_ctx[0];
    for a in assignment.iter_mut().skip(is_ctx[1] as usize + 1) {
        *a -= 1;
    }
    let aut = Automaton::build(ds, Clustering::from_assignment(assignment, None, ds.dim())?)?;
    let merged = aut.state_of(is_ctx[0]);
    ensure!(merged == aut.state_of(is_ctx[1]), "entries not merged");
    ensure!(!aut.delta(merged, id("joe")).is_empty(), "no joe transition");
    ensure!(!aut.delta(merged, id("joseph")).is_empty(), "no joseph transition");

    let model = Model::new(ds, &aut, &built.encoder, &built.base_lm);
    let tcfg = cfg.traversal_config(Tau::Finite(1));
    let bos = vocab.bos_id();
    let recombined = built.valid.document(0);
    let records = run_sequence(&model, recombined, bos, &tcfg, 0)?;
    ensure!(records.iter().skip(1).all(|r| !r.searched), "recombined sequence needed a search");

    let prompt = vocab.encode_text("the president is", TokenizeMode::Whitespace)?;
    let mut emitted = HashSet::new();
    for seed in 0..64 {
        let out = generate(&model, &prompt, 2, GenerationMode::Sample { temperature: 1.0 }, bos, &tcfg, seed)?;
        if out[0].token == id("joe") || out[0].token == id("joseph") {
            ensure!(!out[1].searched, "step after {:?} searched", vocab.token(out[0].token));
            emitted.insert(out[0].token);
        }
    }
    for w in ["joe", "joseph"] {
        ensure!(emitted.contains(&id(w)), "generation never emitted {w}");
        let mut s = TraversalSession::new(0);
        let mut ctx = vec![bos];
        s.start(&model, &built.encoder.encode(&ctx), &tcfg)?;
        for &tok in prompt.iter().chain([id(w)].iter()) {
            ctx.push(tok);
            ensure!(!s.step(&model, tok, &built.encoder.encode(&ctx), &tcfg)?, "search after {w}");
        }
    }
    Ok("merged state branches on joe and joseph; recombined sequence and both continuations search-free".into())
}

fn c8_clustering() -> Result<String> {
    let cfg = config("repetitive");
    let art = Artifacts::build(&cfg)?;
    let ds = &art.datastore;
    let n = ds.len();
    let run = kmeans_with_trace(ds, cfg.k_clust(n), 200, 8)?;
    ensure!(run.converged, "k-means did not converge");
    for w in run.sse_trace.windows(2) {
        ensure!(w[1] <= w[0] * (1.0 + 1e-12), "SSE rose: {} -> {}", w[0], w[1]);
    }
    let c = &run.clustering;
    let centroids = c.centroids().context("k-means keeps centroids")?;
    let dim = ds.dim();
    for e in 0..n as EntryId {
        let key = ds.key(e);
        let dist = |q: usize| -> f64 {
            key.iter().zip(&centroids[q * dim..(q + 1) * dim]).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum()
        };
        let best = (0..c.num_states()).map(dist).fold(f64::INFINITY, f64::min);
        ensure!(dist(c.state_of(e) as usize) <= best + 1e-9, "entry {e} not at its nearest centroid");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let small = random_datastore(&mut rng, 300, 4, 10);
    let distinct: HashSet<Vec<u32>> = (0..300).map(|e| small.key(e).iter().map(|x| x.to_bits()).collect()).collect();
    let small = if distinct.len() == 300 {
        small
    } else {
        let keys: Vec<f32> = (0..300 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Datastore::from_parts(keys, vec![1; 300], vec![None; 300], 4, KeyPrecision::F32)?
    };
    let full = kmeans(&small, 300, 50, 1)?;
    ensure!(full.assignment() == singleton_clustering(&small).assignment(), "k_clust = N is not the singleton clustering");

    let mut sizes = Vec::new();
    for ratio in [10.0, 50.0, 100.0] {
        let mut rc = cfg.clone();
        rc.clustering.cluster_size = ratio;
        let k = rc.k_clust(n);
        let c = kmeans(ds, k, cfg.clustering.iters, cfg.clustering.seed)?;
        ensure!(c.num_states() == k, "{} states for k_clust {k}", c.num_states());
        ensure!((c.average_size() - n as f64 / k as f64).abs() < 1e-9, "average size");
        ensure!((c.average_size() - ratio).abs() <= 1.0, "average size {} vs ratio {ratio}", c.average_size());
        sizes.push(format!("{:.2}", c.average_size()));
    }
    Ok(format!("{} Lloyd steps, SSE non-increasing; average sizes {}", run.sse_trace.len(), sizes.join("/")))
}

fn c9_tau_trend() -> Result<String> {
    let cfg = config("repetitive");
    let art = Artifacts::build(&cfg)?;
    let taus = [Tau::Finite(1), Tau::Finite(2), Tau::Finite(4), Tau::Finite(8), Tau::Infinite];
    let pts = art.with_model(&cfg, |model| Ok(sweep_tau(model, &art.valid, &taus, &cfg.traversal_config(Tau::Infinite))?))?;
    let foss: Vec<f64> = pts.iter().map(|p| p.result.foss).collect();
    let ppl: Vec<f64> = pts.iter().map(|p| p.result.perplexity).collect();
    ensure!(foss.windows(2).all(|w| w[0] >= w[1]), "FoSS not non-increasing in tau: {foss:?}");
    ensure!(foss[0] > foss[3], "FoSS(1) {} <= FoSS(8) {}", foss[0], foss[3]);
    ensure!(ppl[0] >= ppl[4], "perplexity(1) {} < perplexity(inf) {}", ppl[0], ppl[4]);
    ensure!(ppl.iter().all(|&p| p <= ppl[0]), "tau=1 is not the highest-perplexity point: {ppl:?}");
    let pairs: Vec<String> = taus.iter().zip(foss.iter().zip(&ppl)).map(|(t, (f, p))| format!("{t}:{f:.3}/{p:.3}")).collect();
    Ok(format!("tau:foss/ppl {}", pairs.join(" ")))
}

fn c10_pointer_inclusion() -> Result<String> {
    let cfg = config("repetitive_ivf_singleton");
    let art = Artifacts::build(&cfg)?;
    let tcfg = cfg.traversal_config(Tau::Infinite);
    let (auto, knn) = art.with_model(&cfg, |model| {
        Ok((evaluate(model, &art.valid, &tcfg)?.result, baseline_knnlm(model, &art.valid, 0.0, &tcfg)?.result))
    })?;
    ensure!(auto.foss == 0.0, "foss {}", auto.foss);
    ensure!(auto.perplexity <= knn.perplexity, "automaton {:.5} > kNN-LM {:.5}", auto.perplexity, knn.perplexity);
    Ok(format!("tau=inf perplexity {:.5} <= kNN-LM {:.5} (ivf search, single-entry states)", auto.perplexity, knn.perplexity))
}

fn read_all(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "csv") {
            files.insert(path.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&path).unwrap());
        }
    }
    files
}

fn c11_round_trip() -> Result<String> {
    let tmp = tempfile::tempdir()?;
    let cfg = config("repetitive");
    let built = Artifacts::build(&cfg)?;
    built.save(&tmp.path().join("art"), &cfg)?;
    let loaded = Artifacts::load(&tmp.path().join("art"), &cfg)?;
    ensure!(loaded.datastore == built.datastore, "datastore changed on disk");
    ensure!(loaded.automaton == built.automaton, "automaton changed on disk");
    for (art, name) in [(&built, "mem"), (&loaded, "disk")] {
        pipeline::write_outputs(art, &cfg, &tmp.path().join(name), None, true)?;
    }
    let (mem, disk) = (read_all(&tmp.path().join("mem")), read_all(&tmp.path().join("disk")));
    ensure!(!mem.is_empty() && mem == disk, "CSV outputs differ after reload");

    let half = config("repetitive_fp16");
    let h = Artifacts::build(&half)?;
    h.save(&tmp.path().join("half"), &half)?;
    let hl = Artifacts::load(&tmp.path().join("half"), &half)?;
    ensure!(hl.datastore == h.datastore, "fp16 datastore changed on disk");
    let mut worst = 0f64;
    for e in 0..h.datastore.len() as EntryId {
        for (&a, &b) in h.datastore.key(e).iter().zip(&built.datastore.key(e)) {
            // round-to-nearest half precision: relative error ≤ 2^-11 for normal values
            let bound = (b.abs() as f64) * 2f64.powi(-11) + 2f64.powi(-25);
            ensure!(((a - b) as f64).abs() <= bound, "entry {e}: {a} vs {b}");
            worst = worst.max(((a - b) as f64).abs());
        }
    }
    for run in ["h1", "h2"] {
        pipeline::write_outputs(&hl, &half, &tmp.path().join(run), None, true)?;
    }
    ensure!(read_all(&tmp.path().join("h1")) == read_all(&tmp.path().join("h2")), "fp16 eval not deterministic");
    Ok(format!("{} CSVs identical after reload; fp16 max key error {worst:.1e}", mem.len()))
}

/// N-grams of whitespace tokens within blank-line separated documents.
fn oracle_ngrams(text: &str, n: usize) -> Vec<Vec<String>> {
    text.split("\n\n")
        .map(|d| d.split_whitespace().map(String::from).collect::<Vec<_>>())
        .filter(|d| !d.is_empty())
        .flat_map(|d| d.windows(n).map(|w| w.to_vec()).collect::<Vec<_>>())
        .collect()
}

fn oracle_overlap(train: &str, valid: &str, n: usize) -> (f64, f64) {
    let seen: HashSet<Vec<String>> = oracle_ngrams(train, n).into_iter().collect();
    let grams = oracle_ngrams(valid, n);
    let types: HashSet<&Vec<String>> = grams.iter().collect();
    let hits = grams.iter().filter(|g| seen.contains(*g)).count();
    let type_hits = types.iter().filter(|g| seen.contains(**g)).count();
    (type_hits as f64 / types.len() as f64, hits as f64 / grams.len() as f64)
}

fn c12_overlap() -> Result<String> {
    let rep_train = std::fs::read_to_string(root().join("fixtures/repetitive/train.txt"))?;
    let rep_valid = std::fs::read_to_string(root().join("fixtures/repetitive/valid.txt"))?;
    let (t, v) = Corpus::tokenize_pair(&rep_train, &rep_valid, TokenizeMode::Whitespace)?;
    for row in ngram_overlap(&t, &v, 4)? {
        ensure!(row.type_fraction == 1.0 && row.occurrence_fraction == 1.0, "subset fixture n={}: {row:?}", row.n);
    }

    let (t, v) = Corpus::tokenize_pair("a b c\n\nb c a", "x y z\n\nz z y", TokenizeMode::Whitespace)?;
    for row in ngram_overlap(&t, &v, 3)? {
        ensure!(row.defined && row.type_fraction == 0.0 && row.occurrence_fraction == 0.0, "disjoint n={}", row.n);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut doc = |len: usize| (0..len).map(|_| format!("t{}", rng.gen_range(0..5))).collect::<Vec<_>>().join(" ");
    let train = (0..6).map(|_| doc(30)).collect::<Vec<_>>().join("\n\n");
    let valid = (0..4).map(|_| doc(20)).collect::<Vec<_>>().join("\n\n");
    let (t, v) = Corpus::tokenize_pair(&train, &valid, TokenizeMode::Whitespace)?;
    let rows = ngram_overlap(&t, &v, 5)?;
    let mut fractions = Vec::new();
    for row in &rows {
        let (ty, occ) = oracle_overlap(&train, &valid, row.n);
        ensure!(row.type_fraction == ty && row.occurrence_fraction == occ, "mixed n={}: {row:?} vs ({ty}, {occ})", row.n);
        fractions.push(format!("{occ:.3}"));
    }
    Ok(format!("subset 100%, disjoint 0%, mixed occurrence fractions {}", fractions.join("/")))
}

fn hash_dir(dir: &Path, into: &mut Sha256) {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    paths.sort();
    for p in paths {
        if p.is_dir() {
            hash_dir(&p, into);
        } else if p.extension().is_some_and(|e| e != "toml") {
            into.update(p.file_name().unwrap().to_string_lossy().as_bytes());
            into.update(std::fs::read(&p).unwrap());
        }
    }
}

fn c13_determinism() -> Result<String> {
    let tmp = tempfile::tempdir()?;
    let text = std::fs::read_to_string(root().join("configs/repetitive.toml"))?;
    let fixtures = root().join("fixtures/repetitive");
    let mut digests = Vec::new();
    for run in ["a", "b"] {
        let dir = tmp.path().join(run);
        std::fs::create_dir_all(&dir)?;
        let cfg_text = text
            .replace("../fixtures/repetitive", &fixtures.to_string_lossy())
            .replace("../runs/artifacts", &dir.join("artifacts").to_string_lossy())
            .replace("../runs/repetitive", &dir.join("out").to_string_lossy());
        let cfg_path = dir.join("run.toml");
        std::fs::write(&cfg_path, cfg_text)?;
        for sub in ["build", "sweep"] {
            let status = Command::new(env!("CARGO_BIN_EXE_automaton-lm"))
                .args([sub, "--config"])
                .arg(&cfg_path)
                .output()?;
            ensure!(status.status.success(), "{sub} failed: {}", String::from_utf8_lossy(&status.stderr));
        }
        let mut h = Sha256::new();
        hash_dir(&dir.join("artifacts"), &mut h);
        hash_dir(&dir.join("out"), &mut h);
        digests.push(hex::encode(h.finalize()));
    }
    ensure!(digests[0] == digests[1], "outputs differ: {} vs {}", digests[0], digests[1]);
    Ok(format!("artifacts and sweep CSVs hash to {}", &digests[0][..16]))
}

fn main() {
    let criteria: [(&str, fn() -> Result<String>); 13] = [
        ("kNN oracle equivalence", c1_knn_oracle),
        ("p_kNN / p_auto bridge", c2_bridge),
        ("kNN-LM reduction", c3_knnlm_reduction),
        ("restart rule", c4_restart_rule),
        ("tau=inf and lambda=0 extremes", c5_extremes),
        ("verbatim-chain property", c6_verbatim_chain),
        ("cross-sentence composition", c7_cross_sentence),
        ("clustering invariants", c8_clustering),
        ("FoSS/tau trend", c9_tau_trend),
        ("pointer-inclusion effect", c10_pointer_inclusion),
        ("serialization round-trips", c11_round_trip),
        ("overlap analyzer", c12_overlap),
        ("end-to-end determinism", c13_determinism),
    ];
    let started = Instant::now();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check));
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(Ok(detail)) => println!("PASS {:>2} {name} [{secs:.2}s]: {detail}", i + 1),
            Ok(Err(e)) => {
                failed += 1;
                println!("FAIL {:>2} {name} [{secs:.2}s]: {e:#}", i + 1);
            }
            Err(_) => {
                failed += 1;
                println!("FAIL {:>2} {name} [{secs:.2}s]: panicked", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed, {:.1}s total",
        criteria.len() - failed,
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
