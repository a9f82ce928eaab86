//! `geossl` command-line driver.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage errors.

mod experiment;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use geossl::eval::{compare_runs, evaluate, EvalConfig, EvalReport};
use geossl::objectives::Objective;
use geossl::survey::{generate_survey, load_manifest, GeneratorConfig};
use geossl::trainer::{extract_latents, resume_on, train_on, Checkpoint, DataConfig, LatentTable, RunConfig};
use geossl::views::SamplerMode;

const TRAIN_KEYS: &str = "\
Config file keys (TOML; every key is optional):
  objective = simclr|simsiam|moco|swav|deepcluster|dino
  batch_size, epochs, seed, out_dir
  [sampler]    mode = standard|geo, r_loc (metres, required for geo)
  [data]       manifest (path) | [data.generator] (see gen-survey), generator_seed
  [loss]       tau, tau_s, tau_t, momentum, queue_size, sinkhorn_eps, sinkhorn_iters,
               center_momentum, clusters, cluster_every_step
  [augment]    global_size, local_size, n_local, global_scale, local_scale, hflip_p,
               vflip_p, jitter_p, brightness, contrast, hue, blur_p, blur_sigma
  [encoder]    in_channels, widths, latent_dim, projector_hidden, projector_dim,
               predictor_hidden, prototypes
  [optimizer]  lr (default 0.03 * batch_size / 64), momentum, weight_decay
Flags override the file; the merged config is written to <out>/config.toml.";

const GEN_KEYS: &str = "\
Config file keys (TOML): n_patches, n_classes, habitat_scale_m, patch_interval_m,
  track_spacing_m, line_length_m, image_size, channels, class_names, class_weights,
  [[textures]] base_colour, frequency, amplitude, speckle_density, speckle_contrast,
  [observation] pixel_sigma, gain_jitter, colour_cast.
The resolved config is written to <out>/generator.toml.";

const EVAL_KEYS: &str = "\
Config file keys (TOML): pca_dim (0 disables PCA), split_seed, train_fraction,
  [probe] iterations, l2.
The classifier is a multinomial logistic regression (linear probe).";

#[derive(Parser)]
#[command(
    name = "geossl",
    version,
    about = "Location-regularised self-supervised learning on geo-tagged surveys"
)]
struct Cli {
    /// Only print warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic survey (manifest plus image blobs).
    #[command(after_help = GEN_KEYS)]
    GenSurvey(GenArgs),
    /// Train an encoder with one objective, standard or geo sampling.
    #[command(after_help = TRAIN_KEYS)]
    Train(TrainArgs),
    /// Encode every patch of a manifest with a checkpoint.
    Extract(ExtractArgs),
    /// Linear-probe evaluation of a latent table.
    #[command(after_help = EVAL_KEYS)]
    Eval(EvalArgs),
    /// Paired comparison of evaluation reports (A = baseline, B = candidate).
    Compare(CompareArgs),
    /// Run an objectives x modes x seeds grid and summarise it.
    #[command(after_help = experiment::MATRIX_KEYS)]
    Experiment(experiment::ExperimentArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Generator config file.
    #[arg(long)]
    config: PathBuf,
    /// Survey seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Run config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// simclr, simsiam, moco, swav, deepcluster or dino [config: objective]
    #[arg(long, value_parser = parse_objective)]
    objective: Option<Objective>,
    /// standard or geo [config: sampler.mode]
    #[arg(long, value_parser = parse_mode)]
    mode: Option<SamplerMode>,
    /// Positive-pair radius in metres [config: sampler.r_loc]
    #[arg(long)]
    r_loc: Option<f64>,
    /// Output directory [config: out_dir]
    #[arg(long)]
    out: Option<PathBuf>,
    /// [config: seed]
    #[arg(long)]
    seed: Option<u64>,
    /// [config: epochs]
    #[arg(long)]
    epochs: Option<usize>,
    /// [config: batch_size]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Base learning rate [config: optimizer.lr]
    #[arg(long)]
    lr: Option<f64>,
    /// Survey manifest; replaces any generator section [config: data.manifest]
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Continue from this checkpoint up to the configured epochs.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Output CSV (id, z0, z1, ...).
    #[arg(long)]
    out: PathBuf,
    /// Centre-crop size; defaults to the checkpoint's global crop size.
    #[arg(long)]
    crop: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Latent table CSV from `extract`.
    #[arg(long)]
    latents: PathBuf,
    /// Manifest providing the labels.
    #[arg(long)]
    manifest: PathBuf,
    /// Eval config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// [config: pca_dim]
    #[arg(long)]
    pca_dim: Option<usize>,
    /// [config: split_seed]
    #[arg(long)]
    split_seed: Option<u64>,
    /// Output directory for report.json and confusion.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    /// Baseline report.json files, one per seed.
    #[arg(long = "a", required = true, num_args = 1..)]
    a: Vec<PathBuf>,
    /// Candidate report.json files, paired with --a in order.
    #[arg(long = "b", required = true, num_args = 1..)]
    b: Vec<PathBuf>,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
}

fn parse_objective(s: &str) -> std::result::Result<Objective, String> {
    s.parse().map_err(|e: geossl::Error| e.to_string())
}

fn parse_mode(s: &str) -> std::result::Result<SamplerMode, String> {
    s.parse().map_err(|e: geossl::Error| e.to_string())
}

pub(crate) fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub(crate) fn write_toml<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string(value)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn gen_survey(args: GenArgs) -> Result<()> {
    let cfg: GeneratorConfig = read_toml(&args.config)?;
    let cfg = cfg.resolved()?;
    info!("resolved generator config:\n{}", toml::to_string(&cfg)?);
    let survey = generate_survey(&cfg, args.seed)?;
    let manifest = survey.save(&args.out)?;
    write_toml(&args.out.join("generator.toml"), &cfg)?;
    info!("wrote {} patches to {}", survey.len(), manifest.display());
    Ok(())
}

fn train_config(args: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(o) = args.objective {
        cfg.objective = o;
    }
    if let Some(m) = args.mode {
        cfg.sampler.mode = m;
    }
    if let Some(r) = args.r_loc {
        cfg.sampler.r_loc = Some(r);
    }
    if let Some(o) = &args.out {
        cfg.out_dir = Some(o.clone());
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = args.batch_size {
        cfg.batch_size = b;
    }
    if let Some(lr) = args.lr {
        cfg.optimizer.lr = Some(lr);
    }
    if let Some(m) = &args.manifest {
        cfg.data = DataConfig {
            manifest: Some(m.clone()),
            generator: None,
            generator_seed: cfg.data.generator_seed,
        };
    }
    if cfg.out_dir.is_none() {
        bail!("an output directory is required (--out or out_dir)");
    }
    Ok(cfg)
}

fn train(args: TrainArgs) -> Result<()> {
    let cfg = train_config(&args)?;
    cfg.resolved()?;
    let survey = cfg.data.load()?;
    let resolved = cfg.resolve_for(&survey)?;
    info!("resolved run config:\n{}", resolved.to_toml()?);
    let record = match &args.resume {
        Some(p) => resume_on(&cfg, &survey, Checkpoint::load(p)?)?,
        None => train_on(&cfg, &survey)?,
    };
    let last = record
        .checkpoints
        .last()
        .map(|p| p.display().to_string())
        .unwrap_or_default();
    info!(
        "{} {} done: {} epochs, final loss {:?}, checkpoint {last}",
        resolved.objective,
        resolved.sampler.mode,
        record.state.epoch,
        record.losses.last()
    );
    Ok(())
}

fn extract(args: ExtractArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let survey = load_manifest(&args.manifest)?;
    let crop = args.crop.unwrap_or(ck.config.augment.global_size);
    info!("extracting {} patches, centre crop {crop}", survey.len());
    let table = extract_latents(&ck.state.student, &survey, crop)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    table.write_csv(&args.out)?;
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let mut cfg: EvalConfig = match &args.config {
        Some(p) => read_toml(p)?,
        None => EvalConfig::default(),
    };
    if let Some(d) = args.pca_dim {
        cfg.pca_dim = d;
    }
    if let Some(s) = args.split_seed {
        cfg.split_seed = s;
    }
    info!("resolved eval config:\n{}", toml::to_string(&cfg)?);
    let table = LatentTable::read_csv(&args.latents)?;
    let survey = load_manifest(&args.manifest)?;
    let report = evaluate(&table, &survey, &cfg)?;
    report.write(&args.out)?;
    write_toml(&args.out.join("eval.toml"), &cfg)?;
    info!(
        "macro-F1 {:.4} on {} evaluation patches",
        report.macro_f1, report.eval_size
    );
    Ok(())
}

fn compare(args: CompareArgs) -> Result<()> {
    let load = |ps: &[PathBuf]| ps.iter().map(|p| Ok(EvalReport::read(p)?)).collect::<Result<Vec<_>>>();
    let (a, b) = (load(&args.a)?, load(&args.b)?);
    let cmp = compare_runs(&a, &b)?;
    cmp.write_csv(&args.out)?;
    let m = &cmp.rows[0];
    info!(
        "macro-F1 {:.4} -> {:.4} ({:+.4}, {:+.1}%)",
        m.a_mean,
        m.b_mean,
        m.delta,
        100.0 * m.relative
    );
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenSurvey(a) => gen_survey(a).map(|_| true),
        Command::Train(a) => train(a).map(|_| true),
        Command::Extract(a) => extract(a).map(|_| true),
        Command::Eval(a) => eval(a).map(|_| true),
        Command::Compare(a) => compare(a).map(|_| true),
        Command::Experiment(a) => experiment::run(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    env_logger::Builder::new()
        .filter_level(if cli.quiet {
            log::LevelFilter::Warn
        } else {
            log::LevelFilter::Info
        })
        .format_timestamp(None)
        .init();
    if let Some(n) = std::env::var("GEOSSL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not cap threads at {n}: {e}");
        }
    }
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            // Invalid configuration values are usage errors, like bad flags.
            let usage = matches!(e.downcast_ref::<geossl::Error>(), Some(geossl::Error::Config(_)));
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
