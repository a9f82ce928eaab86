use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use log::{error, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use geossl::eval::{evaluate, EvalConfig};
use geossl::objectives::Objective;
use geossl::survey::SurveyManifest;
use geossl::trainer::{extract_latents, train_on, RunConfig};
use geossl::views::{SamplerConfig, SamplerMode};

pub const MATRIX_KEYS: &str = "\
Matrix file keys (TOML):
  dataset = \"name\"            label for the summary CSV
  objectives = [\"simclr\", ...] modes = [\"standard\", \"geo\"]
  seeds = [0, 1, 2]            dims = [128]  (PCA dimension per evaluation; 0 = raw latents)
  r_loc                        geo radius; falls back to run.sampler.r_loc
  jobs                         cells trained concurrently (default 1)
  [run]                        base run config (see `train --help`)
  [eval]                       base eval config (see `eval --help`)
Writes <out>/summary.csv with one row per objective, mode and dim; failed cells
are marked FAILED and make the command exit with status 1.";

#[derive(Args)]
pub struct ExperimentArgs {
    /// Matrix config file.
    #[arg(long)]
    matrix: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Matrix {
    #[serde(default = "default_dataset")]
    pub dataset: String,
    pub objectives: Vec<Objective>,
    pub modes: Vec<SamplerMode>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_dims")]
    pub dims: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_loc: Option<f64>,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
    #[serde(default)]
    pub run: RunConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_dataset() -> String {
    "synthetic".into()
}

fn default_dims() -> Vec<usize> {
    vec![128]
}

fn default_jobs() -> usize {
    1
}

struct Cell {
    objective: Objective,
    mode: SamplerMode,
    seed: u64,
}

impl Cell {
    fn dir(&self, out: &Path) -> PathBuf {
        out.join("cells")
            .join(format!("{}_{}_s{}", self.objective, self.mode, self.seed))
    }
}

/// Trains, extracts and evaluates one cell; returns macro-F1 per dim.
fn run_cell(m: &Matrix, survey: &SurveyManifest, cell: &Cell, out: &Path) -> Result<Vec<f64>> {
    let dir = cell.dir(out);
    let mut cfg = m.run.clone();
    cfg.objective = cell.objective;
    cfg.seed = cell.seed;
    cfg.out_dir = Some(dir.join("run"));
    cfg.sampler = match cell.mode {
        SamplerMode::Standard => SamplerConfig::standard(),
        SamplerMode::Geo => SamplerConfig::geo(
            m.r_loc
                .or(m.run.sampler.r_loc)
                .context("geo mode needs r_loc in the matrix or run.sampler")?,
        ),
    };
    let record = train_on(&cfg, survey)?;
    let crop = record.config.augment.global_size;
    let table = extract_latents(&record.state.student, survey, crop)?;
    table.write_csv(&dir.join("latents.csv"))?;
    m.dims
        .iter()
        .map(|&d| {
            let ecfg = EvalConfig {
                pca_dim: d,
                ..m.eval.clone()
            };
            let report = evaluate(&table, survey, &ecfg)?;
            report.write(&dir.join(format!("eval_d{d}")))?;
            Ok(report.macro_f1)
        })
        .collect()
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Returns `Ok(false)` when any cell failed.
pub fn run(args: ExperimentArgs) -> Result<bool> {
    let m: Matrix = crate::read_toml(&args.matrix)?;
    if m.objectives.is_empty() || m.modes.is_empty() || m.seeds.is_empty() || m.dims.is_empty() {
        bail!("objectives, modes, seeds and dims must all be non-empty");
    }
    let mut run = m.run.clone();
    if let Some(p) = run.data.manifest.as_mut().filter(|p| p.is_relative()) {
        *p = args.matrix.parent().unwrap_or(Path::new(".")).join(&*p);
    }
    let m = Matrix { run, ..m };
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    crate::write_toml(&args.out.join("matrix.toml"), &m)?;
    info!("resolved matrix:\n{}", toml::to_string(&m)?);
    let survey = m.run.data.load()?;

    let mut cells = Vec::new();
    for &objective in &m.objectives {
        for &mode in &m.modes {
            cells.extend(m.seeds.iter().map(|&seed| Cell { objective, mode, seed }));
        }
    }
    info!("running {} cells with {} job(s)", cells.len(), m.jobs.max(1));
    let pool = rayon::ThreadPoolBuilder::new().num_threads(m.jobs.max(1)).build()?;
    let results: Vec<Option<Vec<f64>>> = pool.install(|| {
        cells
            .par_iter()
            .map(|c| match run_cell(&m, &survey, c, &args.out) {
                Ok(f) => {
                    info!("{} {} seed {}: macro-F1 {:?}", c.objective, c.mode, c.seed, f);
                    Some(f)
                }
                Err(e) => {
                    error!("{} {} seed {} failed: {e:#}", c.objective, c.mode, c.seed);
                    None
                }
            })
            .collect()
    });

    let path = args.out.join("summary.csv");
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record([
        "objective",
        "mode",
        "method",
        "dataset",
        "dim",
        "mean_macro_f1",
        "std_macro_f1",
        "seeds",
        "status",
    ])?;
    let mut ok = true;
    for &objective in &m.objectives {
        for &mode in &m.modes {
            let group: Vec<&Option<Vec<f64>>> = cells
                .iter()
                .zip(&results)
                .filter(|(c, _)| c.objective == objective && c.mode == mode)
                .map(|(_, r)| r)
                .collect();
            let failed = group.iter().any(|r| r.is_none());
            ok &= !failed;
            let method = match mode {
                SamplerMode::Geo => objective.geo_name().to_string(),
                SamplerMode::Standard => objective.name().to_string(),
            };
            for (k, &dim) in m.dims.iter().enumerate() {
                let (mean, std, status) = if failed {
                    (String::new(), String::new(), "FAILED")
                } else {
                    let f: Vec<f64> = group.iter().map(|r| r.as_ref().expect("checked")[k]).collect();
                    let (mu, sd) = mean_std(&f);
                    (format!("{mu:.6}"), format!("{sd:.6}"), "ok")
                };
                w.write_record([
                    objective.name(),
                    &mode.to_string(),
                    &method,
                    &m.dataset,
                    &dim.to_string(),
                    &mean,
                    &std,
                    &group.len().to_string(),
                    status,
                ])?;
            }
        }
    }
    w.flush()?;
    info!("wrote {}", path.display());
    Ok(ok)
}
