//! The `disco` command line.
//!
//! Exit codes: 0 on success, 1 when inputs fail validation, 2 on usage errors.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::Deserialize;

use crate::checkpoint::Checkpoint;
use crate::corpus::{load_dataset, AnnotationDataset, LoadOptions, Split};
use crate::diagnostics::{run_diagnostics, DiagnosticsConfig};
use crate::error::{DiscoError, Result};
use crate::features::{
    hashed_bow, load_embeddings, one_hot_annotators, render_metadata_text, MetadataTemplate,
};
use crate::metrics::{evaluate, PerspectivistMetric, SoftMetric, TaskConfig};
use crate::model::{Activation, DiscoConfig, Fusion, Init};
use crate::predict::{predict_tasks, Aggregation, PredictionSet, Predictor};
use crate::synthgen::{generate, GeneratorSpec};
use crate::trainer::{FeaturePair, TrainConfig, Trainer};

#[derive(Debug, Parser)]
#[command(
    name = "disco",
    version,
    about = "Train and evaluate disagreement-aware label distribution models"
)]
struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus with known ground truth.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Validate a dataset and print its size.
    Check { dataset: PathBuf },
    /// Build item or annotator feature vectors, or metadata sentences.
    Featurize(FeaturizeArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Predict soft labels and per-annotator labels.
    Predict(PredictArgs),
    /// Score predictions against the gold annotations.
    Evaluate(EvaluateArgs),
    /// Write the error-analysis tables.
    Diagnose(DiagnoseArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FeatureMode {
    /// Signed hashed bag of words over item text.
    Hashed,
    /// Identity vectors for annotators.
    Onehot,
}

#[derive(Debug, Args)]
struct FeaturizeArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, required_unless_present = "render_metadata")]
    mode: Option<FeatureMode>,
    #[arg(long, default_value_t = 1024)]
    dim: usize,
    /// Weight for a text field, as `name=weight`; repeatable.
    #[arg(long = "field-weight", value_parser = parse_field_weight)]
    field_weights: Vec<(String, f64)>,
    /// Write one `id<TAB>sentence` line per annotator instead of vectors.
    #[arg(long, conflicts_with = "mode")]
    render_metadata: bool,
    /// Sentence template as `subject|clause|clause...`.
    #[arg(long, requires = "render_metadata")]
    template: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    item_feats: PathBuf,
    #[arg(long)]
    annot_feats: PathBuf,
    /// JSON with optional `model` and `train` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier `train`.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Override `train.epochs`.
    #[arg(long)]
    epochs: Option<usize>,
    /// Per-epoch CSV report.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AggArg {
    Expectation,
    Majority,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    item_feats: PathBuf,
    #[arg(long)]
    annot_feats: PathBuf,
    #[arg(long, value_enum, default_value = "expectation")]
    agg: AggArg,
    /// train, dev, test or all.
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TaskAArg {
    Manhattan,
    Wasserstein,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
#[value(rename_all = "snake_case")]
enum TaskBArg {
    ErrorRate,
    AbsDistance,
}

impl From<TaskAArg> for SoftMetric {
    fn from(a: TaskAArg) -> Self {
        match a {
            TaskAArg::Manhattan => SoftMetric::Manhattan,
            TaskAArg::Wasserstein => SoftMetric::Wasserstein,
        }
    }
}

impl From<TaskBArg> for PerspectivistMetric {
    fn from(b: TaskBArg) -> Self {
        match b {
            TaskBArg::ErrorRate => PerspectivistMetric::ErrorRate,
            TaskBArg::AbsDistance => PerspectivistMetric::AbsDistance,
        }
    }
}

#[derive(Debug, Args)]
struct MetricArgs {
    /// Defaults to wasserstein on ordinal scales, manhattan otherwise.
    #[arg(long, value_enum)]
    task_a: Option<TaskAArg>,
    /// Defaults to abs_distance on ordinal scales, error_rate otherwise.
    #[arg(long, value_enum)]
    task_b: Option<TaskBArg>,
    /// Divide absolute distance by the label range (`--normalized=false` to disable).
    #[arg(long, num_args = 0..=1, default_value_t = true, default_missing_value = "true", action = clap::ArgAction::Set)]
    normalized: bool,
}

impl MetricArgs {
    fn task_config(&self, ds: &AnnotationDataset) -> TaskConfig {
        let base = TaskConfig::for_label_space(ds.label_space());
        TaskConfig {
            task_a: self.task_a.map_or(base.task_a, Into::into),
            task_b: self.task_b.map_or(base.task_b, Into::into),
            normalized: self.normalized,
        }
    }
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    preds: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[command(flatten)]
    metrics: MetricArgs,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DiagnoseArgs {
    #[arg(long)]
    preds: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[command(flatten)]
    metrics: MetricArgs,
    /// Soft metric used to rank items as hard or easy (default: Task A metric).
    #[arg(long, value_enum)]
    error_metric: Option<TaskAArg>,
    #[arg(long, default_value_t = 10)]
    bins: usize,
    #[arg(long, default_value_t = 0.25)]
    quantile: f64,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out_dir: PathBuf,
}

fn parse_field_weight(s: &str) -> std::result::Result<(String, f64), String> {
    let (name, w) = s
        .split_once('=')
        .ok_or_else(|| format!("expected name=weight, got `{s}`"))?;
    let w: f64 = w.parse().map_err(|_| format!("`{w}` is not a number"))?;
    Ok((name.to_string(), w))
}

/// Model hyperparameters; dimensions that follow from the data are filled in.
#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ModelSection {
    item_latent_dim: usize,
    annot_latent_dim: usize,
    hidden_dim: Option<usize>,
    activation: Option<Activation>,
    fusion: Fusion,
    init: Option<Init>,
    init_scale: Option<f64>,
    seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            item_latent_dim: 128,
            annot_latent_dim: 64,
            hidden_dim: None,
            activation: None,
            fusion: Fusion::Concat,
            init: None,
            init_scale: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    model: ModelSection,
    train: TrainConfig,
}

fn init_logging() {
    let level = match std::env::var("DISCO_LOG").as_deref() {
        Ok("debug") => log::LevelFilter::Debug,
        Ok("quiet") => log::LevelFilter::Off,
        Ok("info") => log::LevelFilter::Info,
        _ => log::LevelFilter::Warn,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .try_init();
}

/// Parse `argv` (including the program name), run the command, and return
/// the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    init_logging();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            warn!("could not size the thread pool: {e}");
        }
    }
    let mut stdout = String::new();
    match dispatch(cli.command, &mut stdout) {
        Ok(()) => {
            print!("{stdout}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cmd: Command, out: &mut String) -> Result<()> {
    match cmd {
        Command::Synth { spec, out: dir } => synth(&spec, &dir, out),
        Command::Check { dataset } => check(&dataset, out),
        Command::Featurize(a) => featurize(a, out),
        Command::Train(a) => train_cmd(a, out),
        Command::Predict(a) => predict_cmd(a, out),
        Command::Evaluate(a) => evaluate_cmd(a, out),
        Command::Diagnose(a) => diagnose_cmd(a, out),
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| DiscoError::io(path, e))
}

fn view(ds: &AnnotationDataset, split: &str) -> Result<AnnotationDataset> {
    if split == "all" {
        Ok(ds.clone())
    } else {
        ds.split_view_named(split)
    }
}

fn synth(spec: &Path, dir: &Path, out: &mut String) -> Result<()> {
    let spec = GeneratorSpec::from_json_str(&read(spec)?)?;
    let corpus = generate(&spec)?;
    corpus.write_to_dir(dir)?;
    let ds = &corpus.dataset;
    let _ = writeln!(
        out,
        "wrote {} items, {} annotators, {} records to {}",
        ds.num_items(),
        ds.num_annotators(),
        ds.records().len(),
        dir.display()
    );
    Ok(())
}

fn check(path: &Path, out: &mut String) -> Result<()> {
    let ds = load_dataset(path, &LoadOptions::default())?;
    let per_split: Vec<String> = Split::ALL
        .iter()
        .map(|&s| {
            let n = ds.items().iter().filter(|i| i.split == s).count();
            format!("{s}={n}")
        })
        .collect();
    let ls = ds.label_space();
    let _ = writeln!(
        out,
        "M={} N={} C={} records={} requests={} items_per_split[{}] annotations_per_item={:.2} ordinal={}",
        ds.num_items(),
        ds.num_annotators(),
        ds.num_classes(),
        ds.records().len(),
        ds.requests().len(),
        per_split.join(" "),
        ds.records().len() as f64 / ds.num_items() as f64,
        ls.is_ordinal()
    );
    let _ = writeln!(out, "labels: {}", ls.labels().join(" "));
    Ok(())
}

fn featurize(a: FeaturizeArgs, out: &mut String) -> Result<()> {
    let ds = load_dataset(&a.dataset, &LoadOptions::default())?;
    if a.render_metadata {
        let template = match &a.template {
            Some(t) => MetadataTemplate::parse(t)?,
            None => MetadataTemplate::default(),
        };
        let mut text = String::new();
        for annot in ds.annotators() {
            let sentence = render_metadata_text(annot, &template);
            let _ = writeln!(
                text,
                "{}\t{}",
                annot.annotator_id,
                sentence.replace(['\t', '\n'], " ")
            );
        }
        fs::write(&a.out, text).map_err(|e| DiscoError::io(&a.out, e))?;
        let _ = writeln!(
            out,
            "wrote {} metadata sentences to {}",
            ds.num_annotators(),
            a.out.display()
        );
        return Ok(());
    }
    let fm = match a.mode.expect("clap requires --mode here") {
        FeatureMode::Hashed => {
            let weights: HashMap<String, f64> = a.field_weights.into_iter().collect();
            hashed_bow(ds.items(), a.dim, &weights)?
        }
        FeatureMode::Onehot => {
            let ids = ds
                .annotators()
                .iter()
                .map(|x| x.annotator_id.clone())
                .collect();
            one_hot_annotators(ds.num_annotators())?.with_ids(ids)?
        }
    };
    fm.save_tsv(&a.out)?;
    let _ = writeln!(
        out,
        "wrote {} vectors of dim {} to {}",
        fm.len(),
        fm.dim(),
        a.out.display()
    );
    Ok(())
}

fn load_features(a_items: &Path, a_annots: &Path, ds: &AnnotationDataset) -> Result<FeaturePair> {
    let item_ids: Vec<String> = ds.items().iter().map(|i| i.item_id.clone()).collect();
    let annot_ids: Vec<String> = ds
        .annotators()
        .iter()
        .map(|x| x.annotator_id.clone())
        .collect();
    Ok(FeaturePair {
        items: load_embeddings(a_items, &item_ids)?,
        annotators: load_embeddings(a_annots, &annot_ids)?,
    })
}

fn train_cmd(a: TrainArgs, out: &mut String) -> Result<()> {
    let ds = load_dataset(&a.dataset, &LoadOptions::default())?;
    let feats = load_features(&a.item_feats, &a.annot_feats, &ds)?;
    let mut rc: RunConfig = match &a.config {
        Some(p) => serde_json::from_str(&read(p)?)?,
        None => RunConfig::default(),
    };
    if let Some(e) = a.epochs {
        rc.train.epochs = e;
    }
    let mut trainer = match &a.resume {
        Some(p) => {
            info!("resuming from {}", p.display());
            Trainer::from_checkpoint(Checkpoint::load(p)?, &ds, &feats, rc.train)?
        }
        None => {
            let m = rc.model;
            let mut cfg = DiscoConfig::new(
                feats.items.dim(),
                feats.annotators.dim(),
                m.item_latent_dim,
                m.annot_latent_dim,
                ds.num_classes(),
            );
            cfg.hidden_dim = m.hidden_dim;
            cfg.activation = m.activation.unwrap_or(cfg.activation);
            cfg.fusion = m.fusion;
            cfg.init = m.init.unwrap_or(cfg.init);
            cfg.init_scale = m.init_scale;
            cfg.seed = m.seed;
            Trainer::new(&ds, &feats, cfg, rc.train)?
        }
    };
    trainer.run()?;
    trainer.checkpoint().save(&a.out)?;
    if let Some(p) = &a.report {
        trainer.report().save_csv(p)?;
    }
    let report = trainer.report();
    let last = report.epochs.last();
    let _ = writeln!(
        out,
        "trained {} epochs; final loss {}; selected epoch {}; checkpoint {}",
        report.epochs.len(),
        last.map_or(f64::NAN, |e| e.loss),
        report
            .best_epoch
            .map_or_else(|| "last".to_string(), |e| e.to_string()),
        a.out.display()
    );
    Ok(())
}

fn predict_cmd(a: PredictArgs, out: &mut String) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let ds = load_dataset(&a.dataset, &LoadOptions::default())?;
    if ckpt.config.num_classes != ds.num_classes() {
        return Err(DiscoError::Dimension {
            what: "num_classes",
            expected: ckpt.config.num_classes,
            got: ds.num_classes(),
        });
    }
    let feats = load_features(&a.item_feats, &a.annot_feats, &ds)?;
    let agg = match a.agg {
        AggArg::Expectation => Aggregation::Expectation,
        AggArg::Majority => Aggregation::MajorityVote,
    };
    let eval = view(&ds, &a.split)?;
    let predictor = Predictor::new(&ckpt.params, &ckpt.config, &feats.annotators, &ds);
    let preds = predict_tasks(&eval, &feats.items, &predictor, agg)?;
    if preds.fallback_pairs > 0 {
        warn!(
            "{} pairs involve annotators without training data; used the item-level distribution",
            preds.fallback_pairs
        );
    }
    preds.save(&a.out)?;
    let _ = writeln!(
        out,
        "predicted {} items and {} annotator labels to {}",
        preds.soft.len(),
        preds.num_pairs(),
        a.out.display()
    );
    Ok(())
}

fn load_eval(
    preds: &Path,
    dataset: &Path,
    split: &str,
) -> Result<(PredictionSet, AnnotationDataset)> {
    let ds = load_dataset(dataset, &LoadOptions::default())?;
    let eval = view(&ds, split)?;
    let preds = PredictionSet::load(preds, ds.label_space())?;
    Ok((preds, eval))
}

fn evaluate_cmd(a: EvaluateArgs, out: &mut String) -> Result<()> {
    let (preds, eval) = load_eval(&a.preds, &a.dataset, &a.split)?;
    let tc = a.metrics.task_config(&eval);
    let report = evaluate(&preds, &eval, &tc)?;
    if let Some(p) = &a.out {
        report.save(p)?;
    }
    let _ = writeln!(
        out,
        "task_a {} {:.6}\ntask_b {}{} {:.6}",
        report.task_a.metric.as_str(),
        report.task_a.mean,
        report.task_b.metric.as_str(),
        if tc.task_b == PerspectivistMetric::AbsDistance && tc.normalized {
            " (normalized)"
        } else {
            ""
        },
        report.task_b.mean
    );
    Ok(())
}

fn diagnose_cmd(a: DiagnoseArgs, out: &mut String) -> Result<()> {
    let (preds, eval) = load_eval(&a.preds, &a.dataset, &a.split)?;
    let cfg = DiagnosticsConfig {
        task: a.metrics.task_config(&eval),
        error_metric: a.error_metric.map(Into::into),
        calibration_bins: a.bins,
        nad_bins: a.bins,
        quantile: a.quantile,
    };
    let diag = run_diagnostics(&preds, &eval, &cfg)?;
    let written = diag.write_csvs(&a.out_dir)?;
    if diag.tokens.degenerate {
        let _ = writeln!(
            out,
            "note: all item errors are equal; token tables cover every item"
        );
    }
    let _ = writeln!(
        out,
        "wrote {} to {}",
        written.join(", "),
        a.out_dir.display()
    );
    Ok(())
}
