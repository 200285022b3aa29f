//! Command-line front end: `train`, `evaluate`, `merge`, `subset`, `synth`,
//! `report-bias` and `validate-config`.

pub mod config;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use facelora::container::NamedArrays;
use facelora::data::{
    subset, write_synthetic_dataset, AugmentConfig, DatasetManifest, DepthMode, PairProtocol,
    Preprocessor, Record,
};
use facelora::eval::{bias_from_accuracies, evaluate, fmt2, split_by_group, EmbeddingSource};
use facelora::train::{export_merged, finetune, resume, Checkpoint, RunOptions};
use facelora::vit::{load_backbone_weights, NameMapping, ViTBackbone};

pub use config::{Command, ConfigError, RunConfig, RUN_ROOT_ENV, SNAPSHOT_FILE};

/// Exit status for a run that failed while executing.
pub const EXIT_RUNTIME: i32 = 1;
/// Exit status for unknown commands, bad flags and invalid configuration.
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "facelora", version, about = "LoRA fine-tuning of ViT face encoders")]
pub struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Fine-tune adapters and a CosFace head on a frozen backbone.
    Train(TrainArgs),
    /// Score pair protocols and write a metric report.
    Evaluate(EvalArgs),
    /// Fold a checkpoint's adapters into its backbone.
    Merge(MergeArgs),
    /// Write a width subset of a manifest.
    Subset(SubsetArgs),
    /// Generate a synthetic identity dataset with a pair protocol.
    Synth(SynthArgs),
    /// Average, STD and SER of per-group accuracies.
    ReportBias(BiasArgs),
    /// Check a config file and optionally print its resolved form.
    ValidateConfig(ValidateArgs),
}

#[derive(Debug, Args, Default)]
pub struct Common {
    /// Run configuration (TOML). Flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Global seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Backbone weights; a seeded random backbone otherwise.
    #[arg(long)]
    pub backbone: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Keep only this many identities.
    #[arg(long)]
    pub width: Option<usize>,
    /// Compute gradients on one thread.
    #[arg(long)]
    pub sequential: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub protocol: Option<PathBuf>,
    /// Adapter checkpoint applied on top of the backbone.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Merged model, used instead of backbone + checkpoint.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Precomputed embeddings keyed by protocol path.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Manifest with group labels for the bias block.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Embed each pair side separately.
    #[arg(long)]
    pub no_cache: bool,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SubsetArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub width: Option<usize>,
    /// random_identities | top_by_image_count
    #[arg(long)]
    pub depth_mode: Option<DepthMode>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub identities: Option<usize>,
    #[arg(long = "per-id")]
    pub per_id: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub holdout: Option<usize>,
    #[arg(long)]
    pub groups: Option<usize>,
    #[arg(long)]
    pub nuisance: Option<f64>,
}

#[derive(Debug, Args)]
pub struct BiasArgs {
    /// Comma-separated group accuracies in percent.
    #[arg(long, value_delimiter = ',', required = true)]
    pub accuracies: Vec<f64>,
    /// Comma-separated group names.
    #[arg(long, value_delimiter = ',')]
    pub groups: Vec<String>,
    /// Also write `bias.json` here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    pub file: PathBuf,
    /// Print the resolved configuration.
    #[arg(long)]
    pub print: bool,
}

/// Failure of a command, split by exit status.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(e.into())
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<facelora::Error> for Failure {
    fn from(e: facelora::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(anyhow::anyhow!(msg.into()))
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit status. Diagnostics go to stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(f) => {
            let (Failure::Usage(e) | Failure::Runtime(e)) = &f;
            eprintln!("error: {e:#}");
            f.exit_code()
        }
    }
}

pub fn dispatch(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Evaluate(a) => cmd_evaluate(a),
        Cmd::Merge(a) => cmd_merge(a),
        Cmd::Subset(a) => cmd_subset(a),
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::ReportBias(a) => cmd_report_bias(a),
        Cmd::ValidateConfig(a) => cmd_validate(a),
    }
}

/// Loads the config file (or defaults) and applies the shared flags.
fn base_config(common: &Common, command: Command) -> Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.command = Some(command);
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.paths.out_dir = Some(out.clone());
    }
    if common.backbone.is_some() {
        cfg.paths.backbone = common.backbone.clone();
    }
    Ok(cfg)
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn set_path(slot: &mut Option<PathBuf>, flag: &Option<PathBuf>) {
    if flag.is_some() {
        *slot = flag.clone();
    }
}

fn require<'a>(path: &'a Option<PathBuf>, field: &str) -> Result<&'a Path, Failure> {
    let p = path
        .as_deref()
        .ok_or_else(|| usage(format!("invalid configuration: {field}: required for this command")))?;
    if !p.exists() {
        return Err(usage(format!(
            "invalid configuration: {field}: {} does not exist",
            p.display()
        )));
    }
    Ok(p)
}

fn check_optional(path: &Option<PathBuf>, field: &str) -> Result<(), Failure> {
    if path.is_some() {
        require(path, field)?;
    }
    Ok(())
}

/// Validates, fixes the output directory and writes the snapshot before
/// anything else.
fn start_run(mut cfg: RunConfig) -> Result<(RunConfig, PathBuf), Failure> {
    cfg.validate()?;
    let out = cfg.out_dir();
    cfg.paths.out_dir = Some(out.clone());
    cfg.write_snapshot(&out)
        .with_context(|| format!("writing config snapshot into {}", out.display()))?;
    log::info!("run directory {}", out.display());
    Ok((cfg, out))
}

/// The configured backbone, or the seeded random one.
fn load_backbone(cfg: &RunConfig) -> Result<ViTBackbone, Failure> {
    match &cfg.paths.backbone {
        Some(path) => {
            let backbone = match &cfg.paths.mapping {
                Some(m) => {
                    let mapping = NameMapping::load(m)?;
                    let report = load_backbone_weights(&NamedArrays::load(path)?, &mapping, &cfg.vit)?;
                    for name in &report.unused {
                        log::warn!("unused source array `{name}`");
                    }
                    report.backbone
                }
                None => ViTBackbone::load(path)?,
            };
            Ok(backbone)
        }
        None => Ok(ViTBackbone::random(cfg.vit.clone(), cfg.backbone_seed())?),
    }
}

/// A backbone file fixes the architecture; the snapshot records it.
fn adopt_backbone_config(cfg: &mut RunConfig) -> Result<Option<ViTBackbone>, Failure> {
    check_optional(&cfg.paths.backbone, "paths.backbone")?;
    check_optional(&cfg.paths.mapping, "paths.mapping")?;
    if cfg.paths.backbone.is_some() && cfg.paths.mapping.is_none() {
        let b = load_backbone(cfg)?;
        cfg.vit = b.config.clone();
        return Ok(Some(b));
    }
    Ok(None)
}

fn cmd_train(a: TrainArgs) -> Result<(), Failure> {
    let mut cfg = base_config(&a.common, Command::Train)?;
    set_path(&mut cfg.paths.manifest, &a.manifest);
    set_path(&mut cfg.paths.checkpoint, &a.resume);
    set(&mut cfg.train.epochs, a.epochs);
    set(&mut cfg.train.batch_size, a.batch_size);
    set(&mut cfg.train.base_lr, a.lr);
    if a.width.is_some() {
        cfg.subset.width = a.width;
    }
    if a.sequential {
        cfg.train.parallel = false;
    }
    require(&cfg.paths.manifest, "paths.manifest")?;
    check_optional(&cfg.paths.checkpoint, "paths.checkpoint")?;
    let loaded = adopt_backbone_config(&mut cfg)?;
    let (cfg, out) = start_run(cfg)?;

    let backbone = match loaded {
        Some(b) => b,
        None => load_backbone(&cfg)?,
    };
    if cfg.paths.backbone.is_none() {
        backbone.save(out.join("backbone.safetensors"))?;
    }
    let manifest = DatasetManifest::load(cfg.paths.manifest.as_ref().unwrap())?;
    let manifest = if cfg.subset.width.is_some() {
        subset(&manifest, &cfg.subset_spec(manifest.num_identities()))?
    } else {
        manifest
    };
    let options = RunOptions {
        out_dir: Some(out.clone()),
        stop_after_epoch: None,
    };
    let outcome = match &cfg.paths.checkpoint {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            resume(ckpt, &backbone, &manifest, &cfg.train, &options)?
        }
        None => finetune(&backbone, &manifest, &cfg.train, cfg.train_seed(), &options)?,
    };
    let last = outcome.records.last().map_or(f64::NAN, |r| r.loss);
    println!(
        "trained {} epochs ({} steps), final loss {last:.6}",
        outcome.checkpoint.epoch, outcome.checkpoint.step
    );
    println!("checkpoint {}", out.join("checkpoint.safetensors").display());
    Ok(())
}

fn cmd_merge(a: MergeArgs) -> Result<(), Failure> {
    let mut cfg = base_config(&a.common, Command::Merge)?;
    set_path(&mut cfg.paths.checkpoint, &a.checkpoint);
    require(&cfg.paths.checkpoint, "paths.checkpoint")?;
    let loaded = adopt_backbone_config(&mut cfg)?;
    let ckpt = Checkpoint::load(cfg.paths.checkpoint.as_ref().unwrap())?;
    if cfg.paths.backbone.is_none() {
        cfg.vit = ckpt.vit.clone();
    }
    let (cfg, out) = start_run(cfg)?;
    let backbone = match loaded {
        Some(b) => b,
        None => load_backbone(&cfg)?,
    };
    let merged = export_merged(&ckpt, &backbone)?;
    let path = out.join("merged.safetensors");
    merged.save(&path)?;
    println!("merged {}", path.display());
    Ok(())
}

fn cmd_evaluate(a: EvalArgs) -> Result<(), Failure> {
    let mut cfg = base_config(&a.common, Command::Evaluate)?;
    set_path(&mut cfg.paths.protocol, &a.protocol);
    set_path(&mut cfg.paths.checkpoint, &a.checkpoint);
    set_path(&mut cfg.paths.model, &a.model);
    set_path(&mut cfg.paths.embeddings, &a.embeddings);
    set_path(&mut cfg.paths.manifest, &a.manifest);
    if a.no_cache {
        cfg.eval.use_cache = false;
    }
    let protocol_path = require(&cfg.paths.protocol, "paths.protocol")?.to_path_buf();
    for (p, field) in [
        (&cfg.paths.checkpoint, "paths.checkpoint"),
        (&cfg.paths.model, "paths.model"),
        (&cfg.paths.embeddings, "paths.embeddings"),
        (&cfg.paths.manifest, "paths.manifest"),
    ] {
        check_optional(p, field)?;
    }
    let loaded = if cfg.paths.model.is_none() && cfg.paths.embeddings.is_none() {
        adopt_backbone_config(&mut cfg)?
    } else {
        None
    };
    let (cfg, out) = start_run(cfg)?;

    let protocol = PairProtocol::load(&protocol_path)?;
    let name = protocol_path
        .file_stem()
        .map_or("pairs".to_string(), |s| s.to_string_lossy().into_owned());
    let mut benchmarks = vec![(name, protocol.clone())];
    let mut groups = Vec::new();
    if cfg.eval.bias {
        if let Some(m) = &cfg.paths.manifest {
            groups = split_by_group(&protocol, &DatasetManifest::load(m)?)?;
            if groups.len() < 2 {
                log::warn!("fewer than two groups in the manifest; no bias block");
                groups.clear();
            }
        }
    }
    benchmarks.extend(groups.iter().cloned());

    let table;
    let model;
    let adapters;
    let pre;
    let source = if let Some(path) = &cfg.paths.embeddings {
        table = NamedArrays::load(path)?;
        EmbeddingSource::Table(&table)
    } else {
        model = match (&cfg.paths.model, loaded) {
            (Some(path), _) => ViTBackbone::load(path)?,
            (None, Some(b)) => b,
            (None, None) => load_backbone(&cfg)?,
        };
        adapters = match (&cfg.paths.model, &cfg.paths.checkpoint) {
            (None, Some(path)) => {
                let ckpt = Checkpoint::load(path)?;
                ckpt.verify_backbone(&model)?;
                Some(ckpt.adapters)
            }
            _ => None,
        };
        pre = Preprocessor::new(
            model.config.image_size,
            model.pixel_mean.clone(),
            model.pixel_std.clone(),
            AugmentConfig::none(),
        )?;
        EmbeddingSource::Model {
            backbone: &model,
            adapters: adapters.as_ref(),
            preprocessor: &pre,
        }
    };
    let options = cfg.eval_options();
    let mut report = evaluate(source, &benchmarks, &options)?;
    if !groups.is_empty() {
        let per_group = &report.benchmarks[1..];
        let accs: Vec<(String, f64)> =
            per_group.iter().map(|b| (b.name.clone(), b.accuracy)).collect();
        report.bias = Some(bias_from_accuracies(&accs)?);
    }
    report.write_json(out.join("report.json"))?;
    report.write_summary_csv(out.join("summary.csv"))?;
    report.write_roc_csv(&out)?;
    for b in &report.benchmarks {
        println!("{} accuracy {}", b.name, fmt2(b.accuracy));
    }
    if let Some(bias) = &report.bias {
        print_bias(bias);
    }
    println!("report {}", out.join("report.json").display());
    Ok(())
}

fn cmd_subset(a: SubsetArgs) -> Result<(), Failure> {
    let mut cfg = base_config(&a.common, Command::Subset)?;
    set_path(&mut cfg.paths.manifest, &a.manifest);
    if a.width.is_some() {
        cfg.subset.width = a.width;
    }
    set(&mut cfg.subset.depth_mode, a.depth_mode);
    let manifest_path = require(&cfg.paths.manifest, "paths.manifest")?.to_path_buf();
    let (cfg, out) = start_run(cfg)?;
    let manifest = DatasetManifest::load(&manifest_path)?;
    let sub = subset(&manifest, &cfg.subset_spec(manifest.num_identities()))?;
    let base = std::path::absolute(&sub.base_dir).context("resolving manifest directory")?;
    let records = sub
        .records
        .iter()
        .map(|r| Record {
            path: base.join(&r.path).to_string_lossy().into_owned(),
            ..r.clone()
        })
        .collect();
    let written = DatasetManifest::new(records, &out)?;
    let path = out.join("manifest.csv");
    written.save(&path)?;
    println!(
        "subset of {} identities, {} images: {}",
        sub.num_identities(),
        sub.len(),
        path.display()
    );
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<(), Failure> {
    let mut cfg = base_config(&a.common, Command::Synth)?;
    set(&mut cfg.synth.identities, a.identities);
    set(&mut cfg.synth.per_identity, a.per_id);
    set(&mut cfg.synth.image_size, a.image_size);
    set(&mut cfg.synth.holdout, a.holdout);
    set(&mut cfg.synth.groups, a.groups);
    set(&mut cfg.synth.nuisance, a.nuisance);
    let (cfg, out) = start_run(cfg)?;
    let data = cfg.synth_config().generate()?;
    let files = write_synthetic_dataset(&data, &out, cfg.synth.holdout, cfg.pair_seed())?;
    println!(
        "{} identities x {} images in {}",
        cfg.synth.identities,
        cfg.synth.per_identity,
        out.display()
    );
    for p in [&files.manifest, &files.train, &files.heldout, &files.pairs] {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn print_bias(bias: &facelora::eval::BiasReport) {
    println!("average {}", fmt2(bias.average));
    println!("std {}", fmt2(bias.std));
    match bias.ser {
        Some(ser) => println!("ser {}", fmt2(ser)),
        None => println!("ser inf"),
    }
}

fn cmd_report_bias(a: BiasArgs) -> Result<(), Failure> {
    if !a.groups.is_empty() && a.groups.len() != a.accuracies.len() {
        return Err(usage(format!(
            "{} group names for {} accuracies",
            a.groups.len(),
            a.accuracies.len()
        )));
    }
    if let Some(bad) = a.accuracies.iter().find(|v| !(0.0..=100.0).contains(*v)) {
        return Err(usage(format!("accuracy {bad} outside [0, 100]")));
    }
    let named: Vec<(String, f64)> = a
        .accuracies
        .iter()
        .enumerate()
        .map(|(i, &v)| (a.groups.get(i).cloned().unwrap_or_else(|| format!("g{i}")), v))
        .collect();
    let bias = bias_from_accuracies(&named).map_err(|e| Failure::Usage(e.into()))?;
    if let Some(out) = &a.out {
        let mut cfg = RunConfig {
            command: Some(Command::ReportBias),
            ..RunConfig::default()
        };
        cfg.paths.out_dir = Some(out.clone());
        let (_, out) = start_run(cfg)?;
        let path = out.join("bias.json");
        std::fs::write(&path, serde_json::to_string_pretty(&bias).context("encoding bias")? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
    }
    print_bias(&bias);
    Ok(())
}

fn cmd_validate(a: ValidateArgs) -> Result<(), Failure> {
    let cfg = RunConfig::load(&a.file)?;
    cfg.validate()?;
    if a.print {
        print!("{}", cfg.to_toml());
    } else {
        println!("{}: ok", a.file.display());
    }
    Ok(())
}
