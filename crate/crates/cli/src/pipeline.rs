//! Building, caching and evaluating the model described by a [`RunConfig`].

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use automaton_lm::clustering::kmeans;
use automaton_lm::corpus::{ngram_overlap, write_overlap_csv};
use automaton_lm::datastore::IvfIndex;
use automaton_lm::eval::{
    baseline_knnlm, evaluate, timing_harness, write_curve_csv, write_histogram_csv, write_records_csv, write_timing_csv,
    CurveRow, Evaluation, SweepPoint,
};
use automaton_lm::traversal::{generate, GeneratedToken, GenerationMode, Model};
use automaton_lm::{Automaton, Clustering, Corpus, CountLm, Datastore, DecayEncoder, EntryId, Split, StateId, Tau, Vocabulary};
use rayon::prelude::*;

use crate::config::RunConfig;

const VOCAB_FILE: &str = "vocab.txt";
const DATASTORE_FILE: &str = "datastore.rtmd";
const CLUSTERING_FILE: &str = "clustering.rtmc";
const AUTOMATON_FILE: &str = "automaton.rtma";
const IVF_FILE: &str = "ivf.rtmc";
const CONFIG_FILE: &str = "config.toml";

/// Named evaluation outputs, selectable with `--only`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Output {
    /// curve.csv: model,tau,skip_fraction,foss,perplexity,tokens,searches
    Curve,
    /// histogram.csv: tau,length,count (covered lengths of no-search runs)
    Histogram,
    /// overlap.csv: n,type_fraction,occ_fraction,defined
    Overlap,
    /// records_tau<T>.csv: per-token probabilities and search flags
    Records,
    /// timing.csv: tau,foss,seconds,saved_time_fraction (not reproducible)
    Timing,
}

pub struct Artifacts {
    pub train: Corpus,
    pub valid: Corpus,
    pub encoder: DecayEncoder,
    pub base_lm: CountLm,
    pub datastore: Datastore,
    pub automaton: Automaton,
    /// Coarse clustering backing the ivf index, when configured.
    pub ivf: Option<Clustering>,
}

fn read_text(path: &Path, field: &str) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("{field}: cannot read {}", path.display()))
}

pub fn load_corpora(cfg: &RunConfig) -> Result<(Corpus, Corpus)> {
    let train = read_text(&cfg.paths.train, "paths.train")?;
    let valid = read_text(&cfg.paths.valid, "paths.valid")?;
    Corpus::tokenize_pair(&train, &valid, cfg.tokenize_mode()?).context("tokenizing corpora")
}

impl Artifacts {
    /// Builds every artifact in memory.
    pub fn build(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let (train, valid) = load_corpora(cfg)?;
        let encoder = encoder_for(cfg, train.vocab().len())?;
        let datastore = Datastore::build(&train, &encoder, cfg.precision()?)?;
        let clustering = cfg.cluster_algo(datastore.len()).run(&datastore)?;
        let automaton = Automaton::build(&datastore, clustering)?;
        let ivf = if cfg.datastore.index == "ivf" {
            let lists = cfg.datastore.ivf_lists.min(datastore.len());
            Some(kmeans(&datastore, lists, cfg.clustering.iters, cfg.clustering.seed)?)
        } else {
            None
        };
        let base_lm = CountLm::train(&train, cfg.base_lm.order, cfg.base_lm.alpha)?;
        Ok(Artifacts { train, valid, encoder, base_lm, datastore, automaton, ivf })
    }

    pub fn save(&self, dir: &Path, cfg: &RunConfig) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        self.train.vocab().write_to(BufWriter::new(File::create(dir.join(VOCAB_FILE))?))?;
        self.datastore.save(dir.join(DATASTORE_FILE))?;
        self.automaton.clustering().save(dir.join(CLUSTERING_FILE))?;
        self.automaton.save(dir.join(AUTOMATON_FILE))?;
        if let Some(ivf) = &self.ivf {
            ivf.save(dir.join(IVF_FILE))?;
        }
        fs::write(dir.join(CONFIG_FILE), cfg.to_toml()?)?;
        Ok(())
    }

    /// Loads the binary artifacts from `dir`; corpora, encoder and base LM
    /// are cheap and recomputed from the config.
    pub fn load(dir: &Path, cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let path = dir.join(VOCAB_FILE);
        let vocab = Vocabulary::read_from(BufReader::new(File::open(&path).with_context(|| format!("cannot open {}", path.display()))?))
            .with_context(|| format!("reading {}", path.display()))?;
        let vocab = Arc::new(vocab);
        let mode = cfg.tokenize_mode()?;
        let train = Corpus::tokenize_with(&read_text(&cfg.paths.train, "paths.train")?, mode, vocab.clone(), Split::Train)?;
        let valid = Corpus::tokenize_with(&read_text(&cfg.paths.valid, "paths.valid")?, mode, vocab, Split::Validation)?;
        let load_err = |name: &str| format!("loading {}", dir.join(name).display());
        let datastore = Datastore::load(dir.join(DATASTORE_FILE)).with_context(|| load_err(DATASTORE_FILE))?;
        let clustering = Clustering::load(dir.join(CLUSTERING_FILE)).with_context(|| load_err(CLUSTERING_FILE))?;
        let automaton = Automaton::load(dir.join(AUTOMATON_FILE), clustering).with_context(|| load_err(AUTOMATON_FILE))?;
        let ivf = if cfg.datastore.index == "ivf" {
            Some(Clustering::load(dir.join(IVF_FILE)).with_context(|| load_err(IVF_FILE))?)
        } else {
            None
        };
        if datastore.len() != automaton.num_entries() {
            bail!("artifact mismatch: datastore has {} entries, automaton {}", datastore.len(), automaton.num_entries());
        }
        let encoder = encoder_for(cfg, train.vocab().len())?;
        let base_lm = CountLm::train(&train, cfg.base_lm.order, cfg.base_lm.alpha)?;
        Ok(Artifacts { train, valid, encoder, base_lm, datastore, automaton, ivf })
    }

    /// Loads the content-addressed artifacts for `cfg`, building and saving
    /// them first if absent. Returns the artifact directory and whether a
    /// build happened.
    pub fn load_or_build(cfg: &RunConfig) -> Result<(Self, PathBuf, bool)> {
        cfg.validate()?;
        let dir = cfg.artifact_dir()?;
        if dir.join(AUTOMATON_FILE).is_file() {
            return Ok((Self::load(&dir, cfg)?, dir, false));
        }
        let art = Self::build(cfg)?;
        art.save(&dir, cfg)?;
        Ok((art, dir, true))
    }

    /// Runs `f` with the model, wiring in the ivf index when configured.
    pub fn with_model<R>(&self, cfg: &RunConfig, f: impl FnOnce(&Model<'_>) -> Result<R>) -> Result<R> {
        let model = Model::new(&self.datastore, &self.automaton, &self.encoder, &self.base_lm);
        match &self.ivf {
            Some(coarse) => {
                let index = IvfIndex::new(&self.datastore, coarse, cfg.datastore.nprobe)?;
                f(&model.with_index(&index))
            }
            None => f(&model),
        }
    }

    pub fn summary(&self) -> String {
        let c = self.automaton.clustering();
        format!(
            "entries {}\nstates {}\naverage cluster size {:.3}\ntransitions {}",
            self.datastore.len(),
            c.num_states(),
            c.average_size(),
            self.automaton.num_edges()
        )
    }
}

fn encoder_for(cfg: &RunConfig, vocab_size: usize) -> Result<DecayEncoder> {
    let e = &cfg.encoder;
    Ok(DecayEncoder::new(vocab_size, e.dim, e.decay, e.window, e.seed)?)
}

/// One full evaluation per τ, in parallel, records kept.
pub fn sweep(art: &Artifacts, cfg: &RunConfig) -> Result<Vec<(Tau, Evaluation)>> {
    let taus = cfg.taus()?;
    art.with_model(cfg, |model| {
        taus.par_iter()
            .map(|&tau| Ok((tau, evaluate(model, &art.valid, &cfg.traversal_config(tau))?)))
            .collect()
    })
}

pub fn baselines(art: &Artifacts, cfg: &RunConfig) -> Result<Vec<(f64, Evaluation)>> {
    let tcfg = cfg.traversal_config(Tau::Infinite);
    art.with_model(cfg, |model| {
        cfg.eval
            .skip_fractions
            .par_iter()
            .map(|&r| Ok((r, baseline_knnlm(model, &art.valid, r, &tcfg)?)))
            .collect()
    })
}

fn create(out: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = out.join(name);
    Ok(BufWriter::new(File::create(&path).with_context(|| format!("cannot create {}", path.display()))?))
}

/// Writes the selected outputs into `out` and returns their paths. Baseline
/// rows are appended to the curve only when `with_baselines` is set.
pub fn write_outputs(
    art: &Artifacts,
    cfg: &RunConfig,
    out: &Path,
    only: Option<Output>,
    with_baselines: bool,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let wants = |o: Output| only.map_or(o != Output::Timing || cfg.eval.timing, |x| x == o);
    let mut written = Vec::new();

    if wants(Output::Curve) || wants(Output::Histogram) || wants(Output::Records) {
        let points = sweep(art, cfg)?;
        if wants(Output::Curve) {
            let mut rows: Vec<CurveRow> = points.iter().map(|(t, e)| CurveRow::automaton(*t, e.result.clone())).collect();
            if with_baselines {
                rows.extend(baselines(art, cfg)?.into_iter().map(|(r, e)| CurveRow::knnlm(r, e.result)));
            }
            write_curve_csv(create(out, "curve.csv")?, &rows)?;
            written.push(out.join("curve.csv"));
        }
        if wants(Output::Histogram) {
            let sp: Vec<SweepPoint> = points.iter().map(|(t, e)| SweepPoint { tau: *t, result: e.result.clone() }).collect();
            write_histogram_csv(create(out, "histogram.csv")?, &sp)?;
            written.push(out.join("histogram.csv"));
        }
        if wants(Output::Records) {
            for (tau, e) in &points {
                let name = format!("records_tau{tau}.csv");
                write_records_csv(create(out, &name)?, &e.records, art.valid.vocab())?;
                written.push(out.join(name));
            }
        }
    }
    if wants(Output::Overlap) {
        let rows = ngram_overlap(&art.train, &art.valid, cfg.eval.overlap_n_max)?;
        write_overlap_csv(&rows, create(out, "overlap.csv")?)?;
        written.push(out.join("overlap.csv"));
    }
    if wants(Output::Timing) {
        let rows = art.with_model(cfg, |model| {
            Ok(timing_harness(model, &art.valid, &cfg.taus()?, &cfg.traversal_config(Tau::Infinite), cfg.eval.timing_repeats)?)
        })?;
        write_timing_csv(create(out, "timing.csv")?, &rows)?;
        written.push(out.join("timing.csv"));
    }
    fs::write(out.join(CONFIG_FILE), cfg.to_toml()?)?;
    Ok(written)
}

/// Overlap analysis plus corpus statistics; needs no artifacts.
pub fn write_overlap(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let (train, valid) = load_corpora(cfg)?;
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let rows = ngram_overlap(&train, &valid, cfg.eval.overlap_n_max)?;
    write_overlap_csv(&rows, create(out, "overlap.csv")?)?;
    train.write_stats_csv(create(out, "train_stats.csv")?)?;
    valid.write_stats_csv(create(out, "valid_stats.csv")?)?;
    fs::write(out.join(CONFIG_FILE), cfg.to_toml()?)?;
    Ok(["overlap.csv", "train_stats.csv", "valid_stats.csv"].iter().map(|n| out.join(n)).collect())
}

pub fn run_generate(
    art: &Artifacts,
    cfg: &RunConfig,
    prompt: &str,
    length: usize,
    mode: GenerationMode,
) -> Result<Vec<GeneratedToken>> {
    let ids = art.train.vocab().encode_text(prompt, cfg.tokenize_mode()?).context("prompt")?;
    let tau = cfg.taus()?[0];
    let bos = art.train.vocab().bos_id();
    art.with_model(cfg, |model| {
        Ok(generate(model, &ids, length, mode, bos, &cfg.traversal_config(tau), cfg.traversal.seed)?)
    })
}

pub fn describe_generation(vocab: &Vocabulary, tokens: &[GeneratedToken]) -> String {
    let mut s = String::new();
    let words: Vec<&str> = tokens.iter().map(|g| vocab.token(g.token).unwrap_or("?")).collect();
    let _ = writeln!(s, "{}", words.join(" "));
    for (i, (g, w)) in tokens.iter().zip(&words).enumerate() {
        let _ = writeln!(s, "{i}\t{w}\t{}\t{:.6}", if g.searched { "search" } else { "traverse" }, g.prob);
    }
    s
}

fn quoted(vocab: &Vocabulary, id: u32) -> String {
    format!("{:?}", vocab.token(id).unwrap_or("?"))
}

pub fn describe_state(art: &Artifacts, q: StateId) -> Result<String> {
    let aut = &art.automaton;
    if q as usize >= aut.num_states() {
        bail!("state {q} out of range ({} states)", aut.num_states());
    }
    let vocab = art.train.vocab();
    let mut s = String::new();
    let members = aut.members(q);
    let _ = writeln!(s, "state {q}: {} member(s)", members.len());
    for &e in members {
        let target = match art.datastore.pointer(e) {
            Some(p) => format!("entry {p} (state {})", aut.state_of(p)),
            None => "end of document".into(),
        };
        let _ = writeln!(s, "  entry {e} value {} -> {target}", quoted(vocab, art.datastore.value(e)));
    }
    let _ = writeln!(s, "  transitions:");
    for edge in aut.edges(q) {
        let _ = writeln!(s, "    {} -> states {:?}", quoted(vocab, edge.token), edge.states);
    }
    Ok(s)
}

pub fn describe_entry(art: &Artifacts, e: EntryId) -> Result<String> {
    let ds = &art.datastore;
    if e as usize >= ds.len() {
        bail!("entry {e} out of range ({} entries)", ds.len());
    }
    let pointer = ds.pointer(e).map_or("none".to_string(), |p| p.to_string());
    let key: Vec<String> = ds.key(e).iter().map(|x| format!("{x:.4}")).collect();
    Ok(format!(
        "entry {e}: value {} pointer {pointer} state {}\n  key [{}]\n",
        quoted(art.train.vocab(), ds.value(e)),
        art.automaton.state_of(e),
        key.join(", ")
    ))
}
