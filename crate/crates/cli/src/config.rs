//! The declarative run configuration.
//!
//! Every seed is a required field; there is no wall-clock seeding. Relative
//! paths are resolved against the directory holding the config file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use automaton_lm::{ClusterAlgo, KeyPrecision, Tau, TokenizeMode, TraversalConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub paths: PathsConfig,
    #[serde(default)]
    pub corpus: CorpusConfig,
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub base_lm: BaseLmConfig,
    #[serde(default)]
    pub datastore: DatastoreConfig,
    pub clustering: ClusteringConfig,
    pub traversal: TraversalSection,
    #[serde(default)]
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub train: PathBuf,
    pub valid: PathBuf,
    pub artifacts: PathBuf,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub tokenize: String,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig { tokenize: "whitespace".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_decay")]
    pub decay: f64,
    #[serde(default = "default_window")]
    pub window: usize,
    pub seed: u64,
}

fn default_dim() -> usize {
    16
}

fn default_decay() -> f64 {
    0.5
}

fn default_window() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseLmConfig {
    pub order: usize,
    pub alpha: f64,
}

impl Default for BaseLmConfig {
    fn default() -> Self {
        BaseLmConfig { order: 3, alpha: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatastoreConfig {
    pub precision: String,
    pub k_neigh: usize,
    /// "exact" or "ivf".
    pub index: String,
    /// Inverted lists for the ivf index.
    pub ivf_lists: usize,
    pub nprobe: usize,
}

impl Default for DatastoreConfig {
    fn default() -> Self {
        DatastoreConfig { precision: "fp32".into(), k_neigh: 32, index: "exact".into(), ivf_lists: 48, nprobe: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusteringConfig {
    #[serde(default = "default_algo")]
    pub algo: String,
    /// Target average cluster size for k-means; `k_clust = round(N / size)`.
    #[serde(default = "default_cluster_size")]
    pub cluster_size: f64,
    /// Overrides `cluster_size` when set.
    #[serde(default)]
    pub k_clust: Option<usize>,
    #[serde(default = "default_iters")]
    pub iters: usize,
    pub seed: u64,
    #[serde(default = "default_neighbor_k")]
    pub neighbor_k: usize,
    #[serde(default = "default_merge_threshold")]
    pub merge_threshold: f64,
}

fn default_algo() -> String {
    "kmeans".into()
}

fn default_cluster_size() -> f64 {
    100.0
}

fn default_iters() -> usize {
    20
}

fn default_neighbor_k() -> usize {
    32
}

fn default_merge_threshold() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraversalSection {
    /// Integers or "inf".
    #[serde(default = "default_taus")]
    pub taus: Vec<TauValue>,
    #[serde(default = "default_max_knns")]
    pub max_knns: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TauValue {
    Int(i64),
    Str(String),
}

impl std::fmt::Display for TauValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TauValue::Int(t) => write!(f, "{t}"),
            TauValue::Str(s) => f.write_str(s),
        }
    }
}

fn default_taus() -> Vec<TauValue> {
    let mut taus: Vec<TauValue> = [1, 2, 4, 8, 16].map(TauValue::Int).to_vec();
    taus.push(TauValue::Str("inf".into()));
    taus
}

fn default_max_knns() -> usize {
    32
}

fn default_lambda() -> f64 {
    0.25
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Random-skip kNN-LM baselines, one row per fraction.
    pub skip_fractions: Vec<f64>,
    pub overlap_n_max: usize,
    /// Wall-clock timing; off by default since it is not reproducible.
    pub timing: bool,
    pub timing_repeats: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { skip_fractions: vec![0.0, 0.25, 0.5, 0.75, 1.0], overlap_n_max: 4, timing: false, timing_repeats: 3 }
    }
}

/// Command-line overrides, applied after loading.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub cluster_algo: Option<String>,
    pub taus: Option<Vec<String>>,
    pub lambda: Option<f64>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.paths.resolve(base);
        Ok(cfg)
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).context("invalid config")?;
        cfg.paths.resolve(base);
        Ok(cfg)
    }

    /// `--seed` replaces every seed in the file.
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.encoder.seed = seed;
            self.clustering.seed = seed;
            self.traversal.seed = seed;
        }
        if let Some(out) = &o.out {
            self.paths.out = out.clone();
        }
        if let Some(algo) = &o.cluster_algo {
            self.clustering.algo = algo.clone();
        }
        if let Some(taus) = &o.taus {
            self.traversal.taus = taus.iter().map(|t| TauValue::Str(t.clone())).collect();
        }
        if let Some(lambda) = o.lambda {
            self.traversal.lambda = lambda;
        }
    }

    /// Field-level validation. Corpus files must exist.
    pub fn validate(&self) -> Result<()> {
        for (field, path) in [("paths.train", &self.paths.train), ("paths.valid", &self.paths.valid)] {
            if !path.is_file() {
                bail!("{field}: file not found: {}", path.display());
            }
        }
        self.tokenize_mode()?;
        self.precision()?;
        if self.encoder.dim == 0 {
            bail!("encoder.dim: must be positive");
        }
        if self.encoder.window == 0 {
            bail!("encoder.window: must be positive");
        }
        if !(self.encoder.decay > 0.0 && self.encoder.decay <= 1.0) {
            bail!("encoder.decay: must lie in (0, 1]");
        }
        if self.base_lm.order == 0 {
            bail!("base_lm.order: must be at least 1");
        }
        if !(self.base_lm.alpha > 0.0) {
            bail!("base_lm.alpha: must be positive");
        }
        match self.datastore.index.as_str() {
            "exact" => {}
            "ivf" => {
                if self.datastore.ivf_lists == 0 || self.datastore.nprobe == 0 {
                    bail!("datastore.ivf_lists and datastore.nprobe: must be positive");
                }
            }
            other => bail!("datastore.index: expected \"exact\" or \"ivf\", got {other:?}"),
        }
        match self.clustering.algo.as_str() {
            "kmeans" => {
                if self.clustering.k_clust == Some(0) {
                    bail!("clustering.k_clust: must be positive");
                }
                if !(self.clustering.cluster_size >= 1.0) {
                    bail!("clustering.cluster_size: must be at least 1");
                }
            }
            "greedy" => {
                if self.clustering.neighbor_k == 0 {
                    bail!("clustering.neighbor_k: must be positive");
                }
                if !(self.clustering.merge_threshold >= 0.0) {
                    bail!("clustering.merge_threshold: must be non-negative");
                }
            }
            "singleton" => {}
            other => bail!("clustering.algo: expected kmeans, greedy or singleton, got {other:?}"),
        }
        let taus = self.taus()?;
        if taus.is_empty() {
            bail!("traversal.taus: at least one value required");
        }
        for tau in taus {
            self.traversal_config(tau).validate().context("traversal")?;
        }
        for (i, &r) in self.eval.skip_fractions.iter().enumerate() {
            if !(0.0..=1.0).contains(&r) {
                bail!("eval.skip_fractions[{i}]: must lie in [0, 1], got {r}");
            }
        }
        if self.eval.overlap_n_max == 0 {
            bail!("eval.overlap_n_max: must be at least 1");
        }
        Ok(())
    }

    pub fn tokenize_mode(&self) -> Result<TokenizeMode> {
        self.corpus.tokenize.parse().context("corpus.tokenize")
    }

    pub fn precision(&self) -> Result<KeyPrecision> {
        self.datastore.precision.parse().context("datastore.precision")
    }

    pub fn taus(&self) -> Result<Vec<Tau>> {
        self.traversal
            .taus
            .iter()
            .enumerate()
            .map(|(i, t)| t.to_string().parse().with_context(|| format!("traversal.taus[{i}]")))
            .collect()
    }

    /// The clustering algorithm for a datastore of `n` entries.
    pub fn cluster_algo(&self, n: usize) -> ClusterAlgo {
        let c = &self.clustering;
        match c.algo.as_str() {
            "greedy" => ClusterAlgo::Greedy { neighbor_k: c.neighbor_k, merge_threshold: c.merge_threshold },
            "singleton" => ClusterAlgo::Singleton,
            _ => ClusterAlgo::KMeans { k_clust: self.k_clust(n), max_iters: c.iters, seed: c.seed },
        }
    }

    pub fn k_clust(&self, n: usize) -> usize {
        self.clustering
            .k_clust
            .unwrap_or_else(|| (n as f64 / self.clustering.cluster_size).round() as usize)
            .clamp(1, n.max(1))
    }

    pub fn traversal_config(&self, tau: Tau) -> TraversalConfig {
        TraversalConfig {
            tau,
            k_neigh: self.datastore.k_neigh,
            max_knns: self.traversal.max_knns,
            lambda: self.traversal.lambda,
            rng_seed: self.traversal.seed,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Hash of everything the build artifacts depend on: the build-relevant
    /// config sections and the bytes of both corpora.
    pub fn artifact_key(&self) -> Result<String> {
        #[derive(Serialize)]
        struct BuildInputs<'a> {
            corpus: &'a CorpusConfig,
            encoder: &'a EncoderConfig,
            datastore: (&'a str, &'a str, usize),
            clustering: &'a ClusteringConfig,
        }
        let ivf_lists = if self.datastore.index == "ivf" { self.datastore.ivf_lists } else { 0 };
        let inputs = BuildInputs {
            corpus: &self.corpus,
            encoder: &self.encoder,
            datastore: (&self.datastore.precision, &self.datastore.index, ivf_lists),
            clustering: &self.clustering,
        };
        let mut h = Sha256::new();
        h.update(toml::to_string(&inputs)?.as_bytes());
        for path in [&self.paths.train, &self.paths.valid] {
            let bytes = std::fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(&bytes);
        }
        Ok(hex::encode(&h.finalize()[..8]))
    }

    pub fn artifact_dir(&self) -> Result<PathBuf> {
        Ok(self.paths.artifacts.join(self.artifact_key()?))
    }
}

impl PathsConfig {
    fn resolve(&mut self, base: &Path) {
        for p in [&mut self.train, &mut self.valid, &mut self.artifacts, &mut self.out] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}
