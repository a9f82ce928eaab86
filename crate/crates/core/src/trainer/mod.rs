//! Training driver: batch assembly per objective, SGD, EMA teachers,
//! clustering refreshes, checkpoints and latent extraction.
//!
//! Every random choice is drawn from a stream keyed on the run seed and the
//! quantity it serves (epoch shuffle, per-sample views, k-means), so view
//! construction can run on a thread pool without affecting results.

mod checkpoint;
mod config;
mod latents;

use std::f64::consts::PI;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde_json::json;

pub use checkpoint::{Checkpoint, TrainState, CHECKPOINT_FORMAT};
pub use config::{DataConfig, OptimizerConfig, RunConfig};
pub use latents::{center_crop, extract_latents, LatentTable};

use crate::encoder::{images_to_tensor, ModelState, ModelVars};
use crate::error::{Error, Result};
use crate::objectives::{
    build_similarity_matrix, deepcluster_loss, dino_loss, ema_update, kmeans, moco_loss, nt_xent, simsiam_loss,
    swav_loss, MemoryQueue, Objective, TeacherState,
};
use crate::rng::keyed_rng;
use crate::survey::{Image, SpatialIndex, SurveyManifest};
use crate::tensor::{Graph, Tensor, TensorError, Var};
use crate::views::{make_multicrop, make_pair, select_partner, ViewSet};

const SHUFFLE_STREAM: u64 = 0x5348;
const VIEW_STREAM: u64 = 0x5649;
const CLUSTER_STREAM: u64 = 0x434c;

/// Per-epoch results of a run.
#[derive(Clone, Debug)]
pub struct RunRecord {
    /// Fully resolved configuration the run used.
    pub config: RunConfig,
    pub version: String,
    /// Mean step loss of each completed epoch.
    pub losses: Vec<f64>,
    pub wall_ms: Vec<u64>,
    /// Checkpoint files written, starting with the initial state.
    pub checkpoints: Vec<PathBuf>,
    pub state: TrainState,
}

/// Fresh state for `cfg`: initialised student, zero momentum, teacher and
/// queue where the objective needs them.
pub fn initial_state(cfg: &RunConfig) -> Result<TrainState> {
    let student = ModelState::init(&cfg.encoder, cfg.seed)?;
    let teacher = cfg
        .objective
        .uses_teacher()
        .then(|| TeacherState::from_student(&student));
    let queue = if cfg.objective == Objective::Moco {
        Some(MemoryQueue::new(cfg.loss.queue_size, cfg.encoder.projector_dim)?)
    } else {
        None
    };
    Ok(TrainState {
        velocity: vec![0.0; student.len()],
        student,
        teacher,
        queue,
        clusters: None,
        epoch: 0,
        step: 0,
    })
}

/// Batches of source ids for `epoch`: a keyed shuffle cut into chunks of
/// `batch_size`; a trailing single sample is dropped.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut keyed_rng(seed, &[SHUFFLE_STREAM, epoch as u64]));
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Views for each anchor in `ids`, each from its own keyed stream: partner
/// selection first, then augmentation.
pub fn build_views(
    survey: &SurveyManifest,
    index: &SpatialIndex,
    cfg: &RunConfig,
    epoch: usize,
    ids: &[usize],
) -> Result<Vec<ViewSet>> {
    ids.par_iter()
        .map(|&i| {
            let mut rng = keyed_rng(cfg.seed, &[VIEW_STREAM, epoch as u64, i as u64]);
            let j = select_partner(i, &cfg.sampler, index, &mut rng)?;
            if cfg.objective.uses_multicrop() {
                make_multicrop(survey, i, j, &cfg.augment, &mut rng)
            } else {
                make_pair(survey, i, j, &cfg.augment, &mut rng)
            }
        })
        .collect()
}

/// Grid cell size for partner queries.
fn index_for(survey: &SurveyManifest, cfg: &RunConfig) -> Result<SpatialIndex> {
    let cell = cfg.sampler.r_loc.unwrap_or(survey.patch_interval_m()).max(1e-6);
    survey.spatial_index(cell)
}

fn stack(views: &[ViewSet], pick: impl Fn(&ViewSet) -> Vec<&Image>) -> Result<Tensor> {
    let imgs: Vec<&Image> = views.iter().flat_map(pick).collect();
    images_to_tensor(&imgs)
}

fn embed(g: &mut Graph, m: &ModelVars, images: Tensor) -> Result<Var> {
    let x = g.constant(images)?;
    let z = m.encode(g, x)?;
    m.project(g, z)
}

fn split_rows(g: &mut Graph, x: Var, parts: usize, rows: usize) -> Result<Vec<Var>> {
    (0..parts).map(|k| Ok(g.slice(x, 0, k * rows, rows)?)).collect()
}

/// Prototype or centroid logits for every view: globals first, then locals.
fn multicrop_logits(
    g: &mut Graph,
    m: &ModelVars,
    views: &[ViewSet],
    heads: impl Fn(&mut Graph, Var) -> Result<Var>,
) -> Result<Vec<Var>> {
    let b = views.len();
    let globals = stack(views, |v| v.globals.iter().collect())?;
    let zg = embed(g, m, transpose_views(globals, b, 2))?;
    let lg = heads(g, zg)?;
    let mut out = split_rows(g, lg, 2, b)?;
    let n_local = views[0].locals.len();
    if n_local > 0 {
        let locals = stack(views, |v| v.locals.iter().collect())?;
        let zl = embed(g, m, transpose_views(locals, b, n_local))?;
        let ll = heads(g, zl)?;
        out.extend(split_rows(g, ll, n_local, b)?);
    }
    Ok(out)
}

/// Reorders a sample-major stack (`b` samples × `v` views) to view-major.
fn transpose_views(t: Tensor, b: usize, v: usize) -> Tensor {
    let per = t.numel() / (b * v);
    let mut shape = t.shape().to_vec();
    let data = t.into_data();
    let mut out = Vec::with_capacity(data.len());
    for view in 0..v {
        for s in 0..b {
            let k = s * v + view;
            out.extend_from_slice(&data[k * per..(k + 1) * per]);
        }
    }
    shape[0] = b * v;
    Tensor::new(shape, out).expect("same element count")
}

fn cosine_to(g: &mut Graph, z: Var, centroids: &Tensor) -> Result<Var> {
    let zn = g.l2_normalize(z, 1)?;
    let c = g.constant(centroids.clone())?;
    let ct = g.transpose(c)?;
    Ok(g.matmul(zn, ct)?)
}

/// Unit-norm projections of every patch's centre crop, clustered into `k` groups.
fn refresh_clusters(
    survey: &SurveyManifest,
    cfg: &RunConfig,
    state: &ModelState,
    tag: u64,
) -> Result<(Tensor, Vec<usize>)> {
    let k = cfg.loss.cluster_count(survey.class_count());
    let feats = latents::project_all(state, survey, cfg.augment.global_size)?;
    let seed = keyed_rng(cfg.seed, &[CLUSTER_STREAM, tag]).random();
    let mut km = kmeans(&feats, k, seed)?;
    let (rows, d) = (km.centroids.shape()[0], km.centroids.shape()[1]);
    let mut data = km.centroids.into_data();
    for r in 0..rows {
        let row = &mut data[r * d..(r + 1) * d];
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    km.centroids = Tensor::new(vec![rows, d], data)?;
    Ok((km.centroids, km.labels))
}

/// Builds the objective's loss for one batch. Mutates the queue and DINO
/// centre as the objectives prescribe.
fn batch_loss(
    g: &mut Graph,
    cfg: &RunConfig,
    student: &ModelVars,
    state: &mut TrainState,
    views: &[ViewSet],
) -> Result<Var> {
    let b = views.len();
    let lc = &cfg.loss;
    match cfg.objective {
        Objective::Simclr => {
            let x = transpose_views(stack(views, |v| v.globals.iter().collect())?, b, 2);
            let z = embed(g, student, x)?;
            let m = build_similarity_matrix(g, z)?;
            nt_xent(g, m, lc.tau)
        }
        Objective::Simsiam => {
            let x = transpose_views(stack(views, |v| v.globals.iter().collect())?, b, 2);
            let z = embed(g, student, x)?;
            let p = student.predict(g, z)?;
            let (z1, z2) = (g.slice(z, 0, 0, b)?, g.slice(z, 0, b, b)?);
            let (p1, p2) = (g.slice(p, 0, 0, b)?, g.slice(p, 0, b, b)?);
            simsiam_loss(g, p1, z1, p2, z2)
        }
        Objective::Moco => {
            let teacher = state
                .teacher
                .as_ref()
                .ok_or_else(|| Error::Invalid("moco needs a teacher".into()))?;
            let tv = ModelVars::bind(g, &teacher.model, false)?;
            let q = embed(g, student, stack(views, |v| vec![&v.globals[0]])?)?;
            let k = embed(g, &tv, stack(views, |v| vec![&v.globals[1]])?)?;
            debug_assert!(!g.requires_grad(k));
            let queue = state
                .queue
                .as_mut()
                .ok_or_else(|| Error::Invalid("moco needs a queue".into()))?;
            moco_loss(g, q, k, queue, lc.tau)
        }
        Objective::Swav => {
            let logits = multicrop_logits(g, student, views, |g, z| student.prototype_logits(g, z))?;
            swav_loss(g, &logits, 2, lc.tau_s, lc.sinkhorn_eps, lc.sinkhorn_iters)
        }
        Objective::Deepcluster => {
            let (centroids, labels) = state
                .clusters
                .as_ref()
                .ok_or_else(|| Error::Invalid("deepcluster needs pseudo-labels".into()))?;
            let logits = multicrop_logits(g, student, views, |g, z| cosine_to(g, z, centroids))?;
            let targets: Vec<usize> = views.iter().map(|v| labels[v.anchor]).collect();
            let mut total: Option<Var> = None;
            let n_views = logits.len();
            for l in logits {
                let s = g.div_scalar(l, lc.tau_s)?;
                let p = g.softmax(s, 1)?;
                let term = deepcluster_loss(g, p, &targets)?;
                total = Some(match total {
                    Some(acc) => g.add(acc, term)?,
                    None => term,
                });
            }
            let total = total.expect("at least two views");
            Ok(g.div_scalar(total, n_views as f64)?)
        }
        Objective::Dino => {
            let student_logits = multicrop_logits(g, student, views, |g, z| student.prototype_logits(g, z))?;
            let teacher = state
                .teacher
                .as_mut()
                .ok_or_else(|| Error::Invalid("dino needs a teacher".into()))?;
            let tv = ModelVars::bind(g, &teacher.model, false)?;
            let x = transpose_views(stack(views, |v| v.globals.iter().collect())?, b, 2);
            let zt = embed(g, &tv, x)?;
            let lt = tv.prototype_logits(g, zt)?;
            debug_assert!(!g.requires_grad(lt));
            let teacher_logits = split_rows(g, lt, 2, b)?;
            dino_loss(
                g,
                &student_logits,
                &teacher_logits,
                &mut teacher.center,
                lc.tau_s,
                lc.tau_t,
                lc.center_momentum,
            )
        }
    }
}

/// One optimiser step on `views`; returns the loss value.
fn train_step(cfg: &RunConfig, state: &mut TrainState, views: &[ViewSet], lr: f64) -> Result<f64> {
    let mut g = Graph::new();
    let student = ModelVars::bind(&mut g, &state.student, true)?;
    let loss = batch_loss(&mut g, cfg, &student, state, views)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Tensor(TensorError::NonFinite { op: "loss" }));
    }
    g.backward(loss)?;
    let grad = student.flat_grad(&g);
    let (mu, wd) = (cfg.optimizer.momentum, cfg.optimizer.weight_decay);
    let params = state.student.values_mut();
    for ((p, v), gr) in params.iter_mut().zip(state.velocity.iter_mut()).zip(grad) {
        *v = mu * *v + gr + wd * *p;
        *p -= lr * *v;
    }
    if !state.student.values().iter().all(|v| v.is_finite()) {
        return Err(Error::Tensor(TensorError::NonFinite { op: "sgd update" }));
    }
    if let Some(t) = state.teacher.as_mut() {
        ema_update(&mut t.model, &state.student, cfg.loss.momentum)?;
    }
    Ok(value)
}

fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    0.5 * base * (1.0 + (PI * step as f64 / total as f64).cos())
}

struct Outputs {
    dir: PathBuf,
    events: File,
}

impl Outputs {
    fn create(dir: &Path, cfg: &RunConfig) -> Result<Self> {
        let ckdir = dir.join("checkpoints");
        fs::create_dir_all(&ckdir).map_err(|e| Error::io(&ckdir, e))?;
        let cfg_path = dir.join("config.toml");
        fs::write(&cfg_path, cfg.to_toml()?).map_err(|e| Error::io(&cfg_path, e))?;
        let ev = dir.join("events.jsonl");
        let events = File::create(&ev).map_err(|e| Error::io(&ev, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            events,
        })
    }

    fn event(&mut self, value: serde_json::Value) -> Result<()> {
        let path = self.dir.join("events.jsonl");
        writeln!(self.events, "{value}").map_err(|e| Error::io(path, e))
    }

    fn checkpoint(&mut self, cfg: &RunConfig, state: &TrainState) -> Result<PathBuf> {
        let path = self
            .dir
            .join("checkpoints")
            .join(format!("epoch_{:04}.ckpt", state.epoch));
        Checkpoint {
            config: cfg.clone(),
            state: state.clone(),
        }
        .save(&path)?;
        Ok(path)
    }

    fn curves(&self, losses: &[f64], wall: &[u64]) -> Result<()> {
        let mut loss = String::from("epoch,loss\n");
        let mut timing = String::from("epoch,wall_ms\n");
        for (e, (l, w)) in losses.iter().zip(wall).enumerate() {
            loss.push_str(&format!("{},{l}\n", e + 1));
            timing.push_str(&format!("{},{w}\n", e + 1));
        }
        for (name, body) in [("loss.csv", loss), ("timing.csv", timing)] {
            let p = self.dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// Loads the configured dataset and trains on it.
pub fn train(cfg: &RunConfig) -> Result<RunRecord> {
    let survey = cfg.data.load()?;
    train_on(cfg, &survey)
}

/// Trains from scratch on `survey`.
pub fn train_on(cfg: &RunConfig, survey: &SurveyManifest) -> Result<RunRecord> {
    let cfg = cfg.resolve_for(survey)?;
    let state = initial_state(&cfg)?;
    run(&cfg, survey, state)
}

/// Continues from a checkpoint up to `cfg.epochs` total epochs.
pub fn resume_on(cfg: &RunConfig, survey: &SurveyManifest, checkpoint: Checkpoint) -> Result<RunRecord> {
    let cfg = cfg.resolve_for(survey)?;
    if checkpoint.state.student.params() != &cfg.encoder {
        return Err(Error::Config("checkpoint encoder does not match the run config".into()));
    }
    run(&cfg, survey, checkpoint.state)
}

fn run(cfg: &RunConfig, survey: &SurveyManifest, mut state: TrainState) -> Result<RunRecord> {
    let index = index_for(survey, cfg)?;
    let mut out = match &cfg.out_dir {
        Some(d) => Some(Outputs::create(d, cfg)?),
        None => None,
    };
    let version = env!("CARGO_PKG_VERSION").to_string();
    if let Some(o) = out.as_mut() {
        o.event(json!({"event": "run_start", "version": version, "config": cfg}))?;
    }
    log::info!(
        "training {} ({}) on {} patches for {} epochs",
        cfg.objective,
        cfg.sampler.mode,
        survey.len(),
        cfg.epochs
    );

    let steps_per_epoch = epoch_batches(survey.len(), cfg.batch_size, cfg.seed, 0).len();
    let total_steps = steps_per_epoch * cfg.epochs;
    let base_lr = cfg.lr();
    let mut record = RunRecord {
        config: cfg.clone(),
        version,
        losses: Vec::new(),
        wall_ms: Vec::new(),
        checkpoints: Vec::new(),
        state: state.clone(),
    };
    if let Some(o) = out.as_mut() {
        let p = o.checkpoint(cfg, &state)?;
        o.event(json!({"event": "checkpoint", "epoch": state.epoch, "path": p}))?;
        record.checkpoints.push(p);
    }

    while state.epoch < cfg.epochs {
        let started = Instant::now();
        let epoch = state.epoch;
        if cfg.objective == Objective::Deepcluster && (state.clusters.is_none() || !cfg.loss.cluster_every_step) {
            state.clusters = Some(refresh_clusters(survey, cfg, &state.student, state.step as u64)?);
        }
        let mut sum = 0.0;
        let batches = epoch_batches(survey.len(), cfg.batch_size, cfg.seed, epoch);
        for ids in &batches {
            let views = build_views(survey, &index, cfg, epoch, ids)?;
            let lr = cosine_lr(base_lr, state.step, total_steps);
            let loss = train_step(cfg, &mut state, &views, lr).map_err(|e| match e {
                Error::Tensor(TensorError::NonFinite { .. }) => Error::NonFiniteLoss {
                    loss: f64::NAN,
                    epoch,
                    step: state.step,
                    ids: ids.clone(),
                },
                other => other,
            })?;
            sum += loss;
            state.step += 1;
            if cfg.objective == Objective::Deepcluster && cfg.loss.cluster_every_step {
                state.clusters = Some(refresh_clusters(survey, cfg, &state.student, state.step as u64)?);
            }
        }
        state.epoch += 1;
        let mean = sum / batches.len().max(1) as f64;
        let wall = started.elapsed().as_millis() as u64;
        log::info!("epoch {} loss {mean:.6} ({wall} ms)", state.epoch);
        record.losses.push(mean);
        record.wall_ms.push(wall);
        if let Some(o) = out.as_mut() {
            let p = o.checkpoint(cfg, &state)?;
            o.event(json!({"event": "epoch", "epoch": state.epoch, "loss": mean, "wall_ms": wall, "checkpoint": p}))?;
            o.curves(&record.losses, &record.wall_ms)?;
            record.checkpoints.push(p);
        }
    }
    if let Some(o) = out.as_mut() {
        o.curves(&record.losses, &record.wall_ms)?;
        o.event(json!({"event": "run_end", "epochs": state.epoch, "steps": state.step}))?;
    }
    record.state = state;
    Ok(record)
}
