//! Perplexity, fraction of saved searches (FoSS), τ sweeps, the random-skip
//! kNN-LM baseline and CSV reporting.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::datastore::{interpolate, p_knn};
use crate::traversal::{run_sequence, session_seed, Model};
pub use crate::traversal::TokenRecord;
use crate::{Corpus, Error, Result, Tau, TokenId, TraversalConfig, Vocabulary};

/// `2^(-(1/N) Σ log2 p)` over every record.
pub fn perplexity(records: &[TokenRecord]) -> Result<f64> {
    perplexity_of(records.iter())
}

fn perplexity_of<'a>(records: impl Iterator<Item = &'a TokenRecord>) -> Result<f64> {
    let mut total = 0f64;
    let mut n = 0usize;
    for r in records {
        if !(r.prob > 0.0) {
            return Err(Error::ZeroProbability { position: n });
        }
        total += r.prob.log2();
        n += 1;
    }
    if n == 0 {
        return Err(Error::invalid("no tokens to score"));
    }
    Ok((-total / n as f64).exp2())
}

/// `1 - searches / tokens`.
pub fn foss(records: &[TokenRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::invalid("no tokens to score"));
    }
    let searches = records.iter().filter(|r| r.searched).count();
    Ok(1.0 - searches as f64 / records.len() as f64)
}

/// Histogram of run lengths. A run starts at a searched step and covers it
/// plus every following step that did not search:
/// `[T, F, F, T, F]` has runs of length 3 and 2.
pub fn extract_runs(flags: &[bool]) -> BTreeMap<usize, usize> {
    let mut hist = BTreeMap::new();
    let mut open = 0usize;
    for &searched in flags {
        if searched && open > 0 {
            *hist.entry(open).or_insert(0) += 1;
            open = 0;
        }
        open += 1;
    }
    if open > 0 {
        *hist.entry(open).or_insert(0) += 1;
    }
    hist
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub perplexity: f64,
    pub foss: f64,
    pub tokens: usize,
    pub searches: usize,
    pub run_lengths: BTreeMap<usize, usize>,
    pub seconds: f64,
}

impl EvalResult {
    /// Aggregates per-document records; runs never span documents.
    pub fn from_documents(docs: &[Vec<TokenRecord>], seconds: f64) -> Result<Self> {
        let perplexity = perplexity_of(docs.iter().flatten())?;
        let tokens: usize = docs.iter().map(Vec::len).sum();
        let searches = docs.iter().flatten().filter(|r| r.searched).count();
        let mut run_lengths = BTreeMap::new();
        for doc in docs {
            let flags: Vec<bool> = doc.iter().map(|r| r.searched).collect();
            for (len, count) in extract_runs(&flags) {
                *run_lengths.entry(len).or_insert(0) += count;
            }
        }
        Ok(EvalResult {
            perplexity,
            foss: 1.0 - searches as f64 / tokens as f64,
            tokens,
            searches,
            run_lengths,
            seconds,
        })
    }
}

/// Aggregate result plus the per-document records behind it.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub result: EvalResult,
    pub records: Vec<Vec<TokenRecord>>,
}

impl Evaluation {
    fn new(records: Vec<Vec<TokenRecord>>, started: Instant) -> Result<Self> {
        let result = EvalResult::from_documents(&records, started.elapsed().as_secs_f64())?;
        Ok(Evaluation { result, records })
    }
}

fn check_vocab(model: &Model<'_>, corpus: &Corpus) -> Result<()> {
    if corpus.vocab().len() != model.vocab_size() {
        return Err(Error::SizeMismatch(format!(
            "evaluation vocabulary has {} types, model has {}",
            corpus.vocab().len(),
            model.vocab_size()
        )));
    }
    Ok(())
}

/// Teacher-forced traversal over every document; each document gets a fresh
/// session seeded from `cfg.rng_seed` and its index.
pub fn evaluate(model: &Model<'_>, corpus: &Corpus, cfg: &TraversalConfig) -> Result<Evaluation> {
    cfg.validate()?;
    check_vocab(model, corpus)?;
    let bos = corpus.vocab().bos_id();
    let started = Instant::now();
    let records = (0..corpus.num_documents())
        .into_par_iter()
        .map(|i| run_sequence(model, corpus.document(i), bos, cfg, session_seed(cfg.rng_seed, i)))
        .collect::<Result<Vec<_>>>()?;
    Evaluation::new(records, started)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub tau: Tau,
    pub result: EvalResult,
}

/// [`evaluate`] once per τ, everything else held fixed. Points run in
/// parallel and come back in the order of `taus`.
pub fn sweep_tau(model: &Model<'_>, corpus: &Corpus, taus: &[Tau], cfg: &TraversalConfig) -> Result<Vec<SweepPoint>> {
    taus.par_iter()
        .map(|&tau| Ok(SweepPoint { tau, result: evaluate(model, corpus, &cfg.with_tau(tau))?.result }))
        .collect()
}

/// The kNN-LM distribution for one step: `λ·p_kNN + (1 - λ)·p_LM`.
pub fn knnlm_distribution(model: &Model<'_>, context: &[TokenId], query: &[f32], k: usize, lambda: f64) -> Result<Vec<f64>> {
    let nbrs = model.index.search(query, k)?;
    let p = p_knn(model.datastore, &nbrs, model.vocab_size())?;
    interpolate(&p, &model.base_lm.prob(context), lambda)
}

/// kNN-LM that skips the search with probability `skip` at each token and
/// falls back to the base LM there. `skip = 0` is the plain kNN-LM and
/// `skip = 1` the base LM alone.
pub fn baseline_knnlm(model: &Model<'_>, corpus: &Corpus, skip: f64, cfg: &TraversalConfig) -> Result<Evaluation> {
    cfg.validate()?;
    check_vocab(model, corpus)?;
    if !(0.0..=1.0).contains(&skip) {
        return Err(Error::invalid(format!("skip fraction must lie in [0, 1], got {skip}")));
    }
    let bos = corpus.vocab().bos_id();
    let started = Instant::now();
    let records = (0..corpus.num_documents())
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(session_seed(cfg.rng_seed, i));
            let doc = corpus.document(i);
            model.check_tokens(doc, bos)?;
            let mut context = vec![bos];
            let mut out = Vec::with_capacity(doc.len());
            for (t, &gold) in doc.iter().enumerate() {
                let searched = !rng.gen_bool(skip);
                let probs = if searched {
                    let query = model.encoder.encode(&context);
                    knnlm_distribution(model, &context, &query, cfg.k_neigh, cfg.lambda)?
                } else {
                    model.base_lm.prob(&context)
                };
                out.push(TokenRecord {
                    position: t,
                    gold,
                    prob: probs[gold as usize],
                    searched,
                    num_states: 0,
                    active_entries: if searched { cfg.k_neigh } else { 0 },
                });
                context.push(gold);
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Evaluation::new(records, started)
}

/// One line of the FoSS/perplexity trade-off curve.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub model: String,
    pub tau: Option<Tau>,
    pub skip_fraction: Option<f64>,
    pub result: EvalResult,
}

impl CurveRow {
    pub fn automaton(tau: Tau, result: EvalResult) -> Self {
        CurveRow { model: "automaton".into(), tau: Some(tau), skip_fraction: None, result }
    }

    pub fn knnlm(skip: f64, result: EvalResult) -> Self {
        CurveRow { model: "knnlm".into(), tau: None, skip_fraction: Some(skip), result }
    }
}

pub fn write_curve_csv<W: Write>(w: W, rows: &[CurveRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["model", "tau", "skip_fraction", "foss", "perplexity", "tokens", "searches"])?;
    for r in rows {
        out.write_record([
            r.model.clone(),
            r.tau.map(|t| t.to_string()).unwrap_or_default(),
            r.skip_fraction.map(|s| s.to_string()).unwrap_or_default(),
            r.result.foss.to_string(),
            r.result.perplexity.to_string(),
            r.result.tokens.to_string(),
            r.result.searches.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_histogram_csv<W: Write>(w: W, points: &[SweepPoint]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["tau", "length", "count"])?;
    for p in points {
        for (len, count) in &p.result.run_lengths {
            out.write_record([p.tau.to_string(), len.to_string(), count.to_string()])?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_records_csv<W: Write>(w: W, docs: &[Vec<TokenRecord>], vocab: &Vocabulary) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["doc", "position", "gold", "token", "log2_prob", "searched", "num_states", "active_entries"])?;
    for (d, doc) in docs.iter().enumerate() {
        for r in doc {
            out.write_record([
                d.to_string(),
                r.position.to_string(),
                r.gold.to_string(),
                vocab.token(r.gold).unwrap_or("").to_string(),
                r.prob.log2().to_string(),
                u8::from(r.searched).to_string(),
                r.num_states.to_string(),
                r.active_entries.to_string(),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Wall-clock measurement for one τ. Informational only: timings depend on
/// the machine and are never compared against thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct TimingRow {
    pub tau: Tau,
    pub foss: f64,
    pub seconds: f64,
    /// `1 - seconds / seconds(τ = ∞)`.
    pub saved_time_fraction: f64,
}

/// Times [`evaluate`] for each τ (best of `repeats`) against an always-search
/// reference run.
pub fn timing_harness(
    model: &Model<'_>,
    corpus: &Corpus,
    taus: &[Tau],
    cfg: &TraversalConfig,
    repeats: usize,
) -> Result<Vec<TimingRow>> {
    let repeats = repeats.max(1);
    let best = |tau: Tau| -> Result<(f64, f64)> {
        let mut seconds = f64::INFINITY;
        let mut foss = 0.0;
        for _ in 0..repeats {
            let r = evaluate(model, corpus, &cfg.with_tau(tau))?.result;
            seconds = seconds.min(r.seconds);
            foss = r.foss;
        }
        Ok((foss, seconds))
    };
    let (_, reference) = best(Tau::Infinite)?;
    taus.iter()
        .map(|&tau| {
            let (foss, seconds) = best(tau)?;
            Ok(TimingRow { tau, foss, seconds, saved_time_fraction: 1.0 - seconds / reference })
        })
        .collect()
}

pub fn write_timing_csv<W: Write>(w: W, rows: &[TimingRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["tau", "foss", "seconds", "saved_time_fraction"])?;
    for r in rows {
        out.write_record([r.tau.to_string(), r.foss.to_string(), r.seconds.to_string(), r.saved_time_fraction.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn rec(prob: f64, searched: bool) -> TokenRecord {
        TokenRecord { position: 0, gold: 1, prob, searched, num_states: 1, active_entries: 1 }
    }

    #[test]
    fn perplexity_by_hand() {
        let r = [rec(0.5, true), rec(0.125, false)];
        assert_abs_diff_eq!(perplexity(&r).unwrap(), 4.0, epsilon = 1e-12);
        let uniform = vec![rec(1.0 / 16.0, true); 5];
        assert_abs_diff_eq!(perplexity(&uniform).unwrap(), 16.0, epsilon = 1e-12);
        assert_abs_diff_eq!(perplexity(&[rec(1.0, true)]).unwrap(), 1.0);
    }

    #[test]
    fn zero_probability_names_position() {
        let r = [rec(0.5, true), rec(0.5, true), rec(0.0, false)];
        match perplexity(&r) {
            Err(Error::ZeroProbability { position }) => assert_eq!(position, 2),
            other => panic!("{other:?}"),
        }
        assert!(perplexity(&[]).is_err());
    }

    #[test]
    fn foss_by_hand() {
        let r = [rec(0.5, true), rec(0.5, false), rec(0.5, false), rec(0.5, true)];
        assert_abs_diff_eq!(foss(&r).unwrap(), 0.5);
        assert!(foss(&[]).is_err());
    }

    #[test]
    fn runs_example() {
        let h = extract_runs(&[true, false, false, true, false]);
        assert_eq!(h, BTreeMap::from([(2, 1), (3, 1)]));
        assert_eq!(extract_runs(&[true, true]), BTreeMap::from([(1, 2)]));
        assert!(extract_runs(&[]).is_empty());
    }

    #[test]
    fn aggregate_does_not_join_documents() {
        let docs = vec![vec![rec(0.5, true), rec(0.5, false)], vec![rec(0.5, false)]];
        let r = EvalResult::from_documents(&docs, 0.0).unwrap();
        assert_eq!(r.tokens, 3);
        assert_eq!(r.searches, 1);
        assert_eq!(r.run_lengths, BTreeMap::from([(1, 1), (2, 1)]));
        assert_abs_diff_eq!(r.perplexity, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn csv_headers() {
        let res = EvalResult::from_documents(&[vec![rec(0.5, true)]], 0.0).unwrap();
        let mut buf = Vec::new();
        write_curve_csv(&mut buf, &[CurveRow::automaton(Tau::Infinite, res.clone()), CurveRow::knnlm(0.5, res.clone())]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("model,tau,skip_fraction,foss,perplexity,tokens,searches\n"));
        assert!(text.contains("automaton,inf,,0,2,1,1"));
        assert!(text.contains("knnlm,,0.5,0,2,1,1"));

        let mut buf = Vec::new();
        write_histogram_csv(&mut buf, &[SweepPoint { tau: Tau::Finite(2), result: res }]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "tau,length,count\n2,1,1\n");
    }

    proptest! {
        #[test]
        fn runs_partition_the_steps(tail in prop::collection::vec(any::<bool>(), 0..40)) {
            let mut flags = vec![true];
            flags.extend(tail);
            let h = extract_runs(&flags);
            let covered: usize = h.iter().map(|(l, c)| l * c).sum();
            let runs: usize = h.values().sum();
            prop_assert_eq!(covered, flags.len());
            prop_assert_eq!(runs, flags.iter().filter(|&&f| f).count());
        }

        #[test]
        fn foss_and_perplexity_ranges(probs in prop::collection::vec((0.001f64..1.0, any::<bool>()), 1..30)) {
            let r: Vec<TokenRecord> = probs.iter().map(|&(p, s)| rec(p, s)).collect();
            let f = foss(&r).unwrap();
            prop_assert!((0.0..=1.0).contains(&f));
            prop_assert!(perplexity(&r).unwrap() >= 1.0 - 1e-12);
        }
    }
}
