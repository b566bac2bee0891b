pub mod config;
pub mod server;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use fpage_core::cleaning::{run_cleaning, write_cleaning_outputs};
use fpage_core::eval::{
    align_errors, evaluate, paired_t_test, read_predictions, write_predictions, EvalReport, PredictionRecord,
    DEFAULT_THRESHOLDS,
};
use fpage_core::model::ModelCheckpoint;
use fpage_core::probe::{decade_edges, probe};
use fpage_core::review::ReviewStore;
use fpage_core::synth::{EmbeddingStoreGenerator, FaceGenerator, FaceGeneratorConfig};
use fpage_core::train::{load_manifest_samples, train_with_toy, Sample};
use fpage_core::{predict_age, ToyBackbone};

use crate::config::FileConfig;

#[derive(Debug, Parser)]
#[command(name = "fpage", version, about = "Face-parsing-attention age estimation toolkit")]
pub struct Cli {
    /// TOML file with [train], [loss], [codec], [backbone] and [cleaning] sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every run-time seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the attention module and age head on a frozen backbone.
    Train(TrainArgs),
    /// Write per-image predictions for a manifest.
    Predict(PredictArgs),
    /// Predict a manifest and report MAE and cumulative scores.
    Eval(EvalArgs),
    /// Metrics from prediction files, optionally with a paired t-test.
    Metrics(MetricsArgs),
    /// Dataset cleaning.
    #[command(subcommand)]
    Clean(CleanCommand),
    /// Attention-weight statistics per parsing class and age group.
    ProbeAttention(ProbeArgs),
    /// Synthetic fixtures for trying the pipeline end to end.
    #[command(subcommand)]
    Synth(SynthCommand),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON Lines progress log.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Skip averaging with the mirrored image.
    #[arg(long)]
    pub no_flip: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Also write the per-image predictions here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub no_flip: bool,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    #[arg(long)]
    pub pred: PathBuf,
    /// Second prediction file over the same images; prints a paired t-test as JSON.
    #[arg(long)]
    pub compare: Option<PathBuf>,
    /// Number of comparisons for the Bonferroni correction.
    #[arg(long, default_value_t = 1, requires = "compare")]
    pub num_comparisons: usize,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Write the cumulative-score table as CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum CleanCommand {
    /// Constrained clustering consensus for every subject in an embedding store.
    Run(CleanRunArgs),
    /// Serve the review API over a consensus file.
    ReviewServe(ReviewServeArgs),
}

#[derive(Debug, Args)]
pub struct CleanRunArgs {
    /// Directory of per-subject JSON Lines embedding files.
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub min_pts: Option<usize>,
    #[arg(long)]
    pub ambiguity_ratio: Option<f64>,
    /// Output directory for consensus.jsonl and review_queue.jsonl.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReviewServeArgs {
    pub consensus: PathBuf,
    pub decisions: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: std::net::IpAddr,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// CSV output; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum SynthCommand {
    /// Stripe-coded face images with a manifest.
    Faces {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        count: usize,
    },
    /// An embedding store with planted contamination ratios.
    Embeddings {
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated contamination ratio per subject.
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.3, 0.8])]
        ratios: Vec<f64>,
    },
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = FileConfig::load(cli.config.as_deref())?.with_seed(cli.seed);
    match cli.command {
        Command::Train(a) => train_cmd(&cfg, a),
        Command::Predict(a) => {
            let preds = predict_manifest(&a.model, &a.manifest, !a.no_flip)?;
            write_predictions(&a.out, &preds)?;
            println!("wrote {} predictions to {}", preds.len(), a.out.display());
            Ok(())
        }
        Command::Eval(a) => {
            let preds = predict_manifest(&a.model, &a.manifest, !a.no_flip)?;
            if let Some(out) = &a.out {
                write_predictions(out, &preds)?;
            }
            print!("{}", report_text(&evaluate(&preds, &DEFAULT_THRESHOLDS)?));
            Ok(())
        }
        Command::Metrics(a) => metrics_cmd(a),
        Command::Clean(CleanCommand::Run(a)) => clean_cmd(cfg, a),
        Command::Clean(CleanCommand::ReviewServe(a)) => {
            let store = ReviewStore::open(&a.consensus, &a.decisions)?;
            let image_root = std::env::var_os(server::IMAGE_ROOT_ENV).map(PathBuf::from);
            if image_root.is_none() {
                log::warn!("{} not set; thumbnails will not be served", server::IMAGE_ROOT_ENV);
            }
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(server::serve(store, image_root, SocketAddr::new(a.host, a.port)))
        }
        Command::ProbeAttention(a) => {
            let (ckpt, backbone) = load_model(&a.model)?;
            let samples = load_manifest_samples(&a.manifest, &ckpt.codec)?;
            let stats = probe(&samples, &ckpt, &backbone, &decade_edges())?;
            match a.out {
                Some(path) => fs::write(&path, stats.to_csv()).with_context(|| format!("writing {}", path.display()))?,
                None => print!("{}", stats.to_csv()),
            }
            Ok(())
        }
        Command::Synth(SynthCommand::Faces { out, count }) => {
            let backbone = ToyBackbone::build(cfg.backbone.clone())?;
            let gen = FaceGenerator::new(&backbone, FaceGeneratorConfig::default());
            gen.write_dataset(&out, count, cfg.train.seed, &cfg.codec)?;
            println!("wrote {count} images to {}", out.display());
            Ok(())
        }
        Command::Synth(SynthCommand::Embeddings { out, ratios }) => {
            let subjects = EmbeddingStoreGenerator::default().store(&ratios, cfg.cleaning.seed);
            EmbeddingStoreGenerator::write_store(&subjects, &out)?;
            println!("wrote {} subjects to {}", subjects.len(), out.display());
            Ok(())
        }
    }
}

fn train_cmd(cfg: &FileConfig, a: TrainArgs) -> anyhow::Result<()> {
    let backbone = ToyBackbone::build(cfg.backbone.clone())?;
    let train_set = load_manifest_samples(&a.train, &cfg.codec)?;
    let val_set = load_manifest_samples(&a.val, &cfg.codec)?;
    let mut log = match &a.log {
        Some(p) => Some(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => None,
    };
    let mut log_err = None;
    let out = train_with_toy(&train_set, &val_set, &backbone, &cfg.codec, &cfg.train, &cfg.loss, |e| {
        eprintln!(
            "epoch {:3}  lr {:.6}  loss {:.4}  val_mae {:.4}",
            e.epoch, e.lr, e.train_loss, e.val_mae
        );
        if let Some(w) = log.as_mut() {
            let line = serde_json::to_string(e).expect("epoch log serializes");
            if let Err(err) = writeln!(w, "{line}").and_then(|_| w.flush()) {
                log_err.get_or_insert(err);
            }
        }
    })?;
    if let Some(err) = log_err {
        bail!("writing progress log: {err}");
    }
    out.checkpoint.save(&a.out)?;
    let meta = &out.checkpoint.training_meta;
    println!(
        "best epoch {} val_mae {} saved to {}",
        meta.epoch,
        fmt_num(meta.val_mae),
        a.out.display()
    );
    Ok(())
}

fn load_model(path: &Path) -> anyhow::Result<(ModelCheckpoint, ToyBackbone)> {
    let ckpt = ModelCheckpoint::load(path)?;
    let Some(bb) = ckpt.toy_backbone.clone() else {
        bail!(
            "checkpoint {} was trained on backbone '{}' which cannot be rebuilt here",
            path.display(),
            ckpt.backbone_id
        );
    };
    Ok((ckpt, ToyBackbone::build(bb)?))
}

fn predict_manifest(model: &Path, manifest: &Path, flip: bool) -> anyhow::Result<Vec<PredictionRecord>> {
    let (ckpt, backbone) = load_model(model)?;
    let samples = load_manifest_samples(manifest, &ckpt.codec)?;
    samples
        .iter()
        .map(|Sample { record, image }| {
            let (age, _) = predict_age(image, &record.bbox, &ckpt, &backbone, flip)?;
            Ok(PredictionRecord::new(record.image_path.clone(), record.age, age))
        })
        .collect()
}

fn metrics_cmd(a: MetricsArgs) -> anyhow::Result<()> {
    let preds = read_predictions(&a.pred)?;
    let report = evaluate(&preds, &DEFAULT_THRESHOLDS)?;
    if let Some(path) = &a.out {
        fs::write(path, report.cs_csv()).with_context(|| format!("writing {}", path.display()))?;
    }
    match &a.compare {
        None => print!("{}", report_text(&report)),
        Some(other) => {
            let (ea, eb) = align_errors(&preds, &read_predictions(other)?)?;
            let t = paired_t_test(&ea, &eb, a.num_comparisons, a.alpha)?;
            println!("{}", serde_json::to_string_pretty(&t)?);
        }
    }
    Ok(())
}

fn clean_cmd(mut cfg: FileConfig, a: CleanRunArgs) -> anyhow::Result<()> {
    let c = &mut cfg.cleaning;
    c.num_runs = a.runs.unwrap_or(c.num_runs);
    c.eps = a.eps.unwrap_or(c.eps);
    c.min_pts = a.min_pts.unwrap_or(c.min_pts);
    c.ambiguity_ratio = a.ambiguity_ratio.unwrap_or(c.ambiguity_ratio);
    let consensus = run_cleaning(&a.embeddings, c)?;
    write_cleaning_outputs(&a.out, &consensus)?;
    let ambiguous = consensus.iter().filter(|c| c.ambiguous).count();
    println!(
        "subjects {} ambiguous {} written to {}",
        consensus.len(),
        ambiguous,
        a.out.display()
    );
    Ok(())
}

pub fn report_text(r: &EvalReport) -> String {
    let mut s = format!("N {}\nMAE {}\n", r.n, fmt_num(r.mae));
    for (l, v) in &r.cs {
        s.push_str(&format!("CS_{l} {}\n", fmt_num(*v)));
    }
    s
}

/// Four decimals with trailing zeros trimmed, keeping one: `4.2`, `60.0`.
pub fn fmt_num(v: f64) -> String {
    let s = format!("{v:.4}");
    let t = s.trim_end_matches('0');
    if t.ends_with('.') {
        format!("{t}0")
    } else {
        t.to_string()
    }
}
