//! `unitmetric` command line.
//!
//! Exit codes: 0 success, 1 operational error, 2 usage error.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use crate::error::io_err;
use crate::mining::{
    attach_targets, mine_pairs, read_pairs, split_pairs, unit_score, write_pairs, MiningParams, PairRecord,
};
use crate::model::{train, MetricModel, ModelConfig};
use crate::quantizer::{kmeans_fit, quantize, read_features, write_features, Codebook, Distance, KMeansParams};
use crate::stats::{evaluate_scores, read_scores, write_scores};
use crate::synth::{gen_corpus, SynthConfig};
use crate::textmetrics::{text_score, Metric};
use crate::units::{dedup, read_transcripts, read_units_file, write_units_file, UnitSequence, Utterance};

#[derive(Parser, Debug)]
#[command(name = "unitmetric", version, about = "Compare speech utterances as discrete unit sequences")]
pub struct Cli {
    /// Worker threads (default: available parallelism). Outputs do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a k-means codebook on frame features.
    Kmeans(KmeansArgs),
    /// Map features to units with a codebook.
    Quantize(QuantizeArgs),
    /// Collapse runs of repeated units in a unit file or pair file.
    Dedup(DedupArgs),
    /// Score pairs with BLEU or ChrF over units or transcripts. Units are
    /// scored as given, so run `dedup` first for the naive metric.
    Score(ScoreArgs),
    /// Mine (H, R) pairs that share a transcript n-gram.
    Mine(MineArgs),
    /// Split a pair file into train/dev/test.
    Split(SplitArgs),
    /// Generate a synthetic pair corpus.
    Synth(SynthArgs),
    /// Train the learned metric.
    Train(TrainArgs),
    /// Score pairs with a trained model.
    Predict(PredictArgs),
    /// Correlate predicted scores with gold scores.
    Correlate(CorrelateArgs),
}

#[derive(Args, Debug)]
struct KmeansArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    k: usize,
    #[arg(long, default_value = "l2")]
    distance: Distance,
    #[arg(long, default_value_t = 100)]
    max_iters: usize,
    #[arg(long)]
    seed: u64,
    /// Codebook JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct QuantizeArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    codebook: PathBuf,
    /// Unit file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    dedup: bool,
}

#[derive(Args, Debug)]
struct DedupArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
enum ScoreOn {
    Units,
    Transcripts,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long, default_value = "bleu")]
    metric: Metric,
    #[arg(long, value_enum, default_value = "units")]
    on: ScoreOn,
    /// Whitespace tokenisation without lowercasing (transcripts only).
    #[arg(long)]
    raw: bool,
    /// Unit file whose sequences replace the pair units, looked up by utterance id.
    #[arg(long)]
    units: Option<PathBuf>,
    /// Score file; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MineArgs {
    #[arg(long)]
    units: PathBuf,
    /// `id<TAB>transcript` file.
    #[arg(long)]
    transcripts: PathBuf,
    #[arg(long, default_value_t = 4)]
    ngram: usize,
    #[arg(long, default_value_t = 50)]
    max_pairs_per_ngram: usize,
    #[arg(long, default_value_t = 1_000_000)]
    max_total: usize,
    /// Attach text targets with this metric.
    #[arg(long)]
    metric: Option<Metric>,
    #[arg(long)]
    raw: bool,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SplitArgs {
    #[arg(long)]
    pairs: PathBuf,
    /// Train,dev,test fractions.
    #[arg(long, value_parser = parse_fractions, default_value = "0.8,0.1,0.1")]
    fractions: (f64, f64, f64),
    #[arg(long)]
    seed: u64,
    /// Manifest JSON.
    #[arg(long)]
    out: PathBuf,
    /// Also write train/dev/test pair files here.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Synth config JSON; the desk-scale mixture when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n_pairs: Option<usize>,
    #[arg(long)]
    k: Option<u32>,
    #[arg(long)]
    seed: u64,
    /// Pair file.
    #[arg(long)]
    out: PathBuf,
    /// Frame features of every utterance (`<pair>_h`, `<pair>_r`).
    #[arg(long)]
    features: Option<PathBuf>,
    /// Generating centroids as a codebook.
    #[arg(long)]
    codebook: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Model config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Overrides `vocab_size` in the config.
    #[arg(long)]
    k: Option<u32>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: u64,
    /// Final model.
    #[arg(long)]
    out: PathBuf,
    /// Best-dev checkpoint.
    #[arg(long)]
    best_out: Option<PathBuf>,
    /// JSONL training log.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CorrelateArgs {
    /// Pair file with targets, or a score file.
    #[arg(long)]
    gold: PathBuf,
    /// Score file.
    #[arg(long)]
    pred: PathBuf,
    #[arg(long, default_value_t = 20)]
    bins: usize,
    /// Report JSON; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Histogram TSV.
    #[arg(long)]
    histogram: Option<PathBuf>,
}

/// Parses `std::env::args` and runs; returns the process exit code.
pub fn main() -> i32 {
    run_from(std::env::args_os())
}

pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be positive");
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().context("building thread pool")?;
    pool.install(|| match cli.command {
        Command::Kmeans(a) => cmd_kmeans(a),
        Command::Quantize(a) => cmd_quantize(a),
        Command::Dedup(a) => cmd_dedup(a),
        Command::Score(a) => cmd_score(a),
        Command::Mine(a) => cmd_mine(a),
        Command::Split(a) => cmd_split(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Correlate(a) => cmd_correlate(a),
    })
}

fn ensure_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    ensure_parent(path)?;
    fs::write(path, text).map_err(io_err(path))?;
    Ok(())
}

fn write_or_stdout(path: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match path {
        Some(p) => write_text(p, text),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            Ok(out.flush()?)
        }
    }
}

fn is_pair_file(path: &Path) -> anyhow::Result<bool> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text.lines().find(|l| !l.trim().is_empty()).is_some_and(|l| l.trim_start().starts_with('{')))
}

fn cmd_kmeans(a: KmeansArgs) -> anyhow::Result<()> {
    let features = read_features(&a.features)?;
    let fit = kmeans_fit(
        &features,
        &KMeansParams {
            k: a.k,
            distance: a.distance,
            max_iters: a.max_iters,
            seed: a.seed,
        },
    )?;
    eprintln!(
        "k-means: {} iterations, inertia {:.6}",
        fit.inertia.len(),
        fit.inertia.last().copied().unwrap_or(0.0)
    );
    ensure_parent(&a.out)?;
    fit.codebook.save(&a.out)?;
    Ok(())
}

fn cmd_quantize(a: QuantizeArgs) -> anyhow::Result<()> {
    let features = read_features(&a.features)?;
    let cb = Codebook::load(&a.codebook)?;
    let utts = features
        .iter()
        .map(|f| {
            let u = quantize(f, &cb).with_context(|| format!("utterance `{}`", f.id))?;
            Ok(Utterance::new(f.id.clone(), if a.dedup { dedup(&u) } else { u })?)
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    ensure_parent(&a.out)?;
    write_units_file(&utts, &a.out)?;
    eprintln!("quantized {} utterances", utts.len());
    Ok(())
}

fn cmd_dedup(a: DedupArgs) -> anyhow::Result<()> {
    ensure_parent(&a.out)?;
    if is_pair_file(&a.input)? {
        let pairs: Vec<PairRecord> = read_pairs(&a.input, None)?.iter().map(PairRecord::dedup).collect();
        write_pairs(&pairs, &a.out)?;
        eprintln!("de-duplicated {} pairs", pairs.len());
    } else {
        let utts: Vec<Utterance> = read_units_file(&a.input, None)?
            .into_iter()
            .map(|u| Utterance {
                units: dedup(&u.units),
                ..u
            })
            .collect();
        write_units_file(&utts, &a.out)?;
        eprintln!("de-duplicated {} utterances", utts.len());
    }
    Ok(())
}

fn cmd_score(a: ScoreArgs) -> anyhow::Result<()> {
    let mut pairs = read_pairs(&a.pairs, None)?;
    if let Some(path) = &a.units {
        let utts = read_units_file(path, None)?;
        let k = utts
            .iter()
            .map(|u| u.units.vocab_size())
            .chain(pairs.iter().map(PairRecord::vocab_size))
            .max()
            .unwrap_or(1);
        let by_id: BTreeMap<&str, &UnitSequence> = utts.iter().map(|u| (u.id.as_str(), &u.units)).collect();
        for p in &mut pairs {
            let look = |id: &str| {
                by_id
                    .get(id)
                    .map(|u| (*u).clone().with_vocab_size(k))
                    .with_context(|| format!("pair `{}`: utterance `{id}` not in {}", p.pair_id, path.display()))
            };
            let (h, r) = (look(&p.h_id)?, look(&p.r_id)?);
            p.h_units = h?;
            p.r_units = r?;
        }
    }
    let mut scores = BTreeMap::new();
    for p in &pairs {
        let v = match a.on {
            ScoreOn::Units => unit_score(p, a.metric)?,
            ScoreOn::Transcripts => {
                let (Some(h), Some(r)) = (&p.h_transcript, &p.r_transcript) else {
                    bail!("pair `{}` has no transcripts", p.pair_id);
                };
                text_score(h, r, a.metric, a.raw)
            }
        };
        scores.insert(p.pair_id.clone(), v);
    }
    write_or_stdout(a.out.as_deref(), &crate::stats::format_scores(&scores))
}

fn cmd_mine(a: MineArgs) -> anyhow::Result<()> {
    let mut utts = read_units_file(&a.units, None)?;
    let transcripts: BTreeMap<String, String> = read_transcripts(&a.transcripts)?.into_iter().collect();
    for u in &mut utts {
        u.transcript = transcripts.get(&u.id).cloned();
    }
    let mut pairs = mine_pairs(
        &utts,
        &MiningParams {
            ngram: a.ngram,
            max_pairs_per_ngram: a.max_pairs_per_ngram,
            max_total: a.max_total,
            seed: a.seed,
        },
    )?;
    if let Some(metric) = a.metric {
        attach_targets(&mut pairs, metric, a.raw)?;
    }
    ensure_parent(&a.out)?;
    write_pairs(&pairs, &a.out)?;
    eprintln!("mined {} pairs", pairs.len());
    Ok(())
}

fn parse_fractions(s: &str) -> Result<(f64, f64, f64), String> {
    let v = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| format!("`{x}`: {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    match v[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(format!("expected three comma-separated fractions, got {}", v.len())),
    }
}

fn cmd_split(a: SplitArgs) -> anyhow::Result<()> {
    let pairs = read_pairs(&a.pairs, None)?;
    let manifest = split_pairs(&pairs, a.fractions, a.seed)?;
    write_text(&a.out, &(serde_json::to_string_pretty(&manifest)? + "\n"))?;
    if let Some(dir) = &a.out_dir {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let parts = manifest.apply(&pairs);
        for (name, part) in ["train", "dev", "test"].iter().zip(&parts) {
            write_pairs(part, &dir.join(format!("{name}.jsonl")))?;
        }
    }
    eprintln!(
        "split {} pairs: {} train, {} dev, {} test",
        pairs.len(),
        manifest.train.len(),
        manifest.dev.len(),
        manifest.test.len()
    );
    Ok(())
}


fn cmd_synth(a: SynthArgs) -> anyhow::Result<()> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            serde_json::from_str::<SynthConfig>(&text).with_context(|| path.display().to_string())?
        }
        None => SynthConfig::desk_scale(a.n_pairs.unwrap_or(1000), a.k.unwrap_or(200)),
    };
    if let Some(n) = a.n_pairs {
        cfg.n_pairs = n;
    }
    if let Some(k) = a.k {
        cfg.vocab_size = k;
    }
    let corpus = gen_corpus(&cfg, a.seed, a.features.is_some())?;
    ensure_parent(&a.out)?;
    write_pairs(&corpus.pairs, &a.out)?;
    if let Some(path) = &a.features {
        let flat: Vec<_> = corpus.features.into_iter().flat_map(|(h, r)| [h, r]).collect();
        ensure_parent(path)?;
        write_features(&flat, path)?;
    }
    if let Some(path) = &a.codebook {
        ensure_parent(path)?;
        corpus.codebook.save(path)?;
    }
    eprintln!("generated {} pairs", corpus.pairs.len());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    let text = fs::read_to_string(&a.config).map_err(io_err(&a.config))?;
    let mut cfg: ModelConfig = serde_json::from_str(&text).with_context(|| a.config.display().to_string())?;
    if let Some(k) = a.k {
        cfg.vocab_size = k;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    cfg.seed = a.seed;
    let train_pairs = read_pairs(&a.pairs, Some(cfg.vocab_size))?;
    let dev_pairs = a.dev.as_deref().map(|p| read_pairs(p, Some(cfg.vocab_size))).transpose()?;
    let mut log = match &a.log {
        Some(p) => {
            ensure_parent(p)?;
            Some(BufWriter::new(fs::File::create(p).map_err(io_err(p))?))
        }
        None => None,
    };
    eprintln!(
        "training on {} pairs ({} dev), {} epochs",
        train_pairs.len(),
        dev_pairs.as_ref().map_or(0, Vec::len),
        cfg.epochs
    );
    let outcome = train(
        &cfg,
        &train_pairs,
        dev_pairs.as_deref(),
        log.as_mut().map(|w| w as &mut dyn Write),
    )?;
    if let (Some(w), Some(p)) = (log.as_mut(), &a.log) {
        w.flush().map_err(io_err(p))?;
    }
    ensure_parent(&a.out)?;
    outcome.model.save(&a.out)?;
    if let Some(path) = &a.best_out {
        ensure_parent(path)?;
        outcome.best.as_ref().unwrap_or(&outcome.model).save(path)?;
    }
    if let Some(r) = outcome.best_dev_pearson {
        eprintln!("best dev pearson {r:.4}");
    }
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> anyhow::Result<()> {
    let model = MetricModel::load(&a.model)?;
    let pairs = read_pairs(&a.pairs, Some(model.config().vocab_size))?;
    let pairs: Vec<PairRecord> = pairs.iter().map(PairRecord::dedup).collect();
    let scores = model.predict_all(&pairs)?;
    match &a.out {
        Some(p) => {
            ensure_parent(p)?;
            write_scores(&scores, p)?;
        }
        None => write_or_stdout(None, &crate::stats::format_scores(&scores))?,
    }
    Ok(())
}

fn cmd_correlate(a: CorrelateArgs) -> anyhow::Result<()> {
    let gold = if is_pair_file(&a.gold)? {
        let mut gold = BTreeMap::new();
        for p in read_pairs(&a.gold, None)? {
            let t = p.target.with_context(|| format!("pair `{}` in {} has no target", p.pair_id, a.gold.display()))?;
            gold.insert(p.pair_id, t);
        }
        gold
    } else {
        read_scores(&a.gold)?
    };
    let pred = read_scores(&a.pred)?;
    let report = evaluate_scores(&pred, &gold, a.bins)?;
    eprintln!(
        "n = {}, pearson {:.4}, spearman {:.4}, histogram L1 {:.4}",
        report.n,
        report.pearson,
        report.spearman,
        report.histogram_l1()
    );
    if let Some(path) = &a.histogram {
        write_text(path, &report.histogram_tsv())?;
    }
    write_or_stdout(a.out.as_deref(), &(serde_json::to_string_pretty(&report)? + "\n"))
}
