use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use automaton_lm::fixture::{self, FixtureParams};
use automaton_lm::traversal::GenerationMode;
use automaton_lm_cli::config::{Overrides, RunConfig};
use automaton_lm_cli::pipeline::{self, Artifacts, Output};
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Build and evaluate a retrieval automaton over a kNN datastore.
///
/// Outputs (CSV, written to the configured out directory):
///   curve.csv           model,tau,skip_fraction,foss,perplexity,tokens,searches
///   histogram.csv       tau,length,count   (tokens covered per search-anchored run)
///   overlap.csv         n,type_fraction,occ_fraction,defined
///   records_tau<T>.csv  doc,position,gold,token,log2_prob,searched,num_states,active_entries
///   timing.csv          tau,foss,seconds,saved_time_fraction   (opt-in, not reproducible)
///
/// Exit codes: 0 success, 1 usage error, 2 data or artifact error.
#[derive(Parser)]
#[command(name = "automaton-lm", version, verbatim_doc_comment)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Replaces every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    cluster_algo: Option<AlgoArg>,
    /// Restart thresholds, comma separated ("inf" for always search).
    #[arg(long, value_delimiter = ',')]
    tau: Option<Vec<String>>,
    /// Interpolation weight of the retrieval distribution.
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AlgoArg {
    Kmeans,
    Greedy,
    Singleton,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Argmax,
    Sample,
}

#[derive(Clone, Copy, ValueEnum)]
enum FixtureKind {
    Repetitive,
    Novel,
    SharedPrefix,
}

#[derive(Subcommand)]
enum Command {
    /// Build the datastore, clustering and automaton artifacts.
    Build(Common),
    /// τ sweep plus random-skip baselines and overlap analysis.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Write only this output.
        #[arg(long, value_enum)]
        only: Option<Output>,
    },
    /// τ sweep only: curve and histogram.
    Sweep(Common),
    /// Free-running generation from a prompt.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 20)]
        length: usize,
        #[arg(long, value_enum, default_value = "argmax")]
        mode: ModeArg,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
    },
    /// Dump automaton states or datastore entries.
    Inspect {
        #[command(flatten)]
        common: Common,
        #[arg(long, group = "target")]
        state: Option<u32>,
        #[arg(long, group = "target")]
        entry: Option<u32>,
        /// Dump this many seeded-random states.
        #[arg(long, group = "target")]
        sample: Option<usize>,
        /// GraphViz output instead of text (states only).
        #[arg(long)]
        dot: bool,
    },
    /// Train/validation n-gram overlap and corpus statistics.
    Overlap(Common),
    /// Write a synthetic train/valid corpus pair.
    Fixture {
        #[arg(long, value_enum)]
        kind: FixtureKind,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&c.config)?;
    cfg.apply(&Overrides {
        seed: c.seed,
        out: c.out.clone(),
        cluster_algo: c.cluster_algo.map(|a| {
            match a {
                AlgoArg::Kmeans => "kmeans",
                AlgoArg::Greedy => "greedy",
                AlgoArg::Singleton => "singleton",
            }
            .to_string()
        }),
        taus: c.tau.clone(),
        lambda: c.lambda,
    });
    cfg.validate()?;
    Ok(cfg)
}

fn print_written(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Build(common) => {
            let cfg = load_config(&common)?;
            let (art, dir, built) = Artifacts::load_or_build(&cfg)?;
            println!("{}", art.summary());
            println!("artifacts {} ({})", dir.display(), if built { "built" } else { "cached" });
        }
        Command::Eval { common, only } => {
            let cfg = load_config(&common)?;
            let written = if only == Some(Output::Overlap) {
                pipeline::write_overlap(&cfg, &cfg.paths.out)?
            } else {
                let (art, _, _) = Artifacts::load_or_build(&cfg)?;
                pipeline::write_outputs(&art, &cfg, &cfg.paths.out, only, true)?
            };
            print_written(&written);
        }
        Command::Sweep(common) => {
            let cfg = load_config(&common)?;
            let (art, _, _) = Artifacts::load_or_build(&cfg)?;
            let mut written = pipeline::write_outputs(&art, &cfg, &cfg.paths.out, Some(Output::Curve), false)?;
            written.extend(pipeline::write_outputs(&art, &cfg, &cfg.paths.out, Some(Output::Histogram), false)?);
            print_written(&written);
        }
        Command::Generate { common, prompt, length, mode, temperature } => {
            let cfg = load_config(&common)?;
            let (art, _, _) = Artifacts::load_or_build(&cfg)?;
            let mode = match mode {
                ModeArg::Argmax => GenerationMode::Argmax,
                ModeArg::Sample => GenerationMode::Sample { temperature },
            };
            let tokens = pipeline::run_generate(&art, &cfg, &prompt, length, mode)?;
            print!("{}", pipeline::describe_generation(art.train.vocab(), &tokens));
        }
        Command::Inspect { common, state, entry, sample, dot } => {
            let cfg = load_config(&common)?;
            let (art, _, _) = Artifacts::load_or_build(&cfg)?;
            let states = match (state, entry, sample) {
                (Some(q), _, _) => vec![q],
                (_, Some(e), _) => {
                    print!("{}", pipeline::describe_entry(&art, e)?);
                    return Ok(());
                }
                (_, _, Some(n)) => art.automaton.sample_states(n, cfg.traversal.seed),
                _ => bail!("one of --state, --entry or --sample is required"),
            };
            if dot {
                if let Some(&q) = states.iter().find(|&&q| q as usize >= art.automaton.num_states()) {
                    bail!("state {q} out of range ({} states)", art.automaton.num_states());
                }
                let mut out = std::io::stdout().lock();
                art.automaton.write_dot(&mut out, &art.datastore, art.train.vocab(), &states, 8)?;
            } else {
                for q in states {
                    print!("{}", pipeline::describe_state(&art, q)?);
                }
            }
        }
        Command::Overlap(common) => {
            let cfg = load_config(&common)?;
            print_written(&pipeline::write_overlap(&cfg, &cfg.paths.out)?);
        }
        Command::Fixture { kind, seed, out } => {
            let params = FixtureParams { seed, ..Default::default() };
            let text = match kind {
                FixtureKind::Repetitive => fixture::repetitive(&params),
                FixtureKind::Novel => fixture::novel(&params),
                FixtureKind::SharedPrefix => fixture::shared_prefix(),
            };
            std::fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
            std::fs::write(out.join("train.txt"), text.train + "\n")?;
            std::fs::write(out.join("valid.txt"), text.valid + "\n")?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
