//! Downstream evaluation: optional PCA, a linear probe on a stratified split,
//! macro-F1 and confusion matrices, and paired comparisons between runs.
//!
//! The probe is a multinomial logistic regression rather than an SVM; every
//! report names the classifier it used.

mod metrics;
mod pca;
mod probe;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use metrics::{confusion, macro_f1, per_class, ClassMetrics};
pub use pca::{pca_apply, pca_fit, PcaModel};
pub use probe::{probe_train, stratified_split, ProbeConfig, ProbeModel, Split};

use crate::error::{Error, Result};
use crate::survey::SurveyManifest;
use crate::tensor::Tensor;
use crate::trainer::LatentTable;

pub const CLASSIFIER: &str = "multinomial logistic regression (linear probe)";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// PCA output dimension; 0 disables the reduction.
    pub pca_dim: usize,
    pub split_seed: u64,
    pub train_fraction: f64,
    pub probe: ProbeConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            pca_dim: 128,
            split_seed: 0,
            train_fraction: 0.6,
            probe: ProbeConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub name: String,
    #[serde(flatten)]
    pub metrics: ClassMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classifier: String,
    pub macro_f1: f64,
    pub per_class: Vec<ClassReport>,
    /// `confusion[r][p]`: reference `r` predicted as `p`, evaluation split only.
    pub confusion: Vec<Vec<usize>>,
    pub train_size: usize,
    pub eval_size: usize,
    pub latent_dim: usize,
    /// Dimension the probe saw after PCA.
    pub probe_dim: usize,
    /// Classes with no evaluation samples; each contributes F1 = 0.
    pub absent_classes: Vec<String>,
    /// Patch ids in the evaluation split, which identify the split.
    pub eval_ids: Vec<usize>,
    pub config: EvalConfig,
}

impl EvalReport {
    pub fn class_names(&self) -> Vec<&str> {
        self.per_class.iter().map(|c| c.name.as_str()).collect()
    }

    /// Writes `report.json` and `confusion.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("report.json");
        fs::write(&json, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&json, e))?;
        let path = dir.join("confusion.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
        let mut write = |rec: Vec<String>| {
            w.write_record(rec)
                .map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
        };
        let names = self.class_names();
        write(
            std::iter::once("reference\\predicted".to_string())
                .chain(names.iter().map(|s| s.to_string()))
                .collect(),
        )?;
        for (name, row) in names.iter().zip(&self.confusion) {
            write(
                std::iter::once(name.to_string())
                    .chain(row.iter().map(usize::to_string))
                    .collect(),
            )?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn select_rows(x: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let d = x.shape()[1];
    let data = rows.iter().flat_map(|&r| x.row(r).iter().copied()).collect();
    Ok(Tensor::new(vec![rows.len(), d], data)?)
}

/// Probe evaluation of `latents` against survey labels. Unlabelled patches
/// are skipped; PCA and the probe are fitted on the training split only.
pub fn evaluate(table: &LatentTable, survey: &SurveyManifest, cfg: &EvalConfig) -> Result<EvalReport> {
    let labels = survey.labels();
    if table.ids.len() != table.latents.shape()[0] {
        return Err(Error::Invalid("latent table ids and rows differ in length".into()));
    }
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for (r, &id) in table.ids.iter().enumerate() {
        let label = *labels.get(id).ok_or(Error::UnknownPatch(id))?;
        if let Some(l) = label {
            rows.push(r);
            y.push(l);
        }
    }
    evaluate_labelled(
        &select_rows(&table.latents, &rows)?,
        &y,
        &rows.iter().map(|&r| table.ids[r]).collect::<Vec<_>>(),
        survey.class_names(),
        cfg,
    )
}

/// As [`evaluate`], on latents already paired with labels and ids.
pub fn evaluate_labelled(
    x: &Tensor,
    labels: &[usize],
    ids: &[usize],
    class_names: &[String],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let c = class_names.len();
    let split = stratified_split(labels, c, cfg.train_fraction, cfg.split_seed)?;
    let latent_dim = x.shape()[1];
    let (mut xtr, mut xev) = (select_rows(x, &split.train)?, select_rows(x, &split.eval)?);
    if cfg.pca_dim > 0 {
        let pca = pca_fit(&xtr, cfg.pca_dim)?;
        xtr = pca_apply(&pca, &xtr)?;
        xev = pca_apply(&pca, &xev)?;
    }
    let ytr: Vec<usize> = split.train.iter().map(|&i| labels[i]).collect();
    let yev: Vec<usize> = split.eval.iter().map(|&i| labels[i]).collect();
    let all: Vec<usize> = (0..ytr.len()).collect();
    let model = probe_train(&xtr, &ytr, &all, c, &cfg.probe)?;
    let pred = model.predict(&xev)?;
    let pc = per_class(&pred, &yev, c)?;
    let absent: Vec<String> = pc
        .iter()
        .zip(class_names)
        .filter(|(m, _)| m.support == 0)
        .map(|(_, n)| n.clone())
        .collect();
    if !absent.is_empty() {
        log::warn!(
            "classes absent from the evaluation split count as F1 = 0: {}",
            absent.join(", ")
        );
    }
    Ok(EvalReport {
        classifier: CLASSIFIER.into(),
        macro_f1: macro_f1(&pred, &yev, c)?,
        confusion: confusion(&pred, &yev, c)?,
        per_class: pc
            .into_iter()
            .zip(class_names)
            .map(|(metrics, name)| ClassReport {
                name: name.clone(),
                metrics,
            })
            .collect(),
        train_size: split.train.len(),
        eval_size: split.eval.len(),
        latent_dim,
        probe_dim: xtr.shape()[1],
        absent_classes: absent,
        eval_ids: split.eval.iter().map(|&i| ids[i]).collect(),
        config: cfg.clone(),
    })
}

/// One row of a paired comparison: the macro row or a class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub name: String,
    pub a_mean: f64,
    pub a_std: f64,
    pub b_mean: f64,
    pub b_std: f64,
    /// `b_mean - a_mean`.
    pub delta: f64,
    /// `(b_mean - a_mean) / a_mean`; NaN when `a_mean` is 0.
    pub relative: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub runs: usize,
    /// The macro-F1 row first, then one row per class F1.
    pub rows: Vec<DeltaRow>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Pairs `a[k]` with `b[k]` (one pair per seed) and summarises F1 as
/// mean ± sample std per side, with absolute and relative deltas.
pub fn compare_runs(a: &[EvalReport], b: &[EvalReport]) -> Result<Comparison> {
    if a.is_empty() || a.len() != b.len() {
        return Err(Error::Invalid(format!(
            "comparison needs equal, non-zero report counts, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let names = a[0].class_names();
    for (k, (x, y)) in a.iter().zip(b).enumerate() {
        if x.class_names() != names || y.class_names() != names {
            return Err(Error::Invalid(format!("pair {k}: reports cover different classes")));
        }
        if x.eval_ids != y.eval_ids {
            return Err(Error::Invalid(format!(
                "pair {k}: reports use different evaluation splits"
            )));
        }
    }
    let row = |name: &str, f: &dyn Fn(&EvalReport) -> f64| {
        let (am, asd) = mean_std(&a.iter().map(f).collect::<Vec<_>>());
        let (bm, bsd) = mean_std(&b.iter().map(f).collect::<Vec<_>>());
        DeltaRow {
            name: name.into(),
            a_mean: am,
            a_std: asd,
            b_mean: bm,
            b_std: bsd,
            delta: bm - am,
            relative: if am == 0.0 { f64::NAN } else { (bm - am) / am },
        }
    };
    let mut rows = vec![row("macro", &|r| r.macro_f1)];
    for (k, name) in names.iter().enumerate() {
        rows.push(row(name, &|r| r.per_class[k].metrics.f1));
    }
    Ok(Comparison { runs: a.len(), rows })
}

impl Comparison {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let err = |e: csv::Error| Error::Invalid(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        w.write_record(["metric", "a_mean", "a_std", "b_mean", "b_std", "delta", "relative"])
            .map_err(err)?;
        for r in &self.rows {
            let vals = [r.a_mean, r.a_std, r.b_mean, r.b_std, r.delta, r.relative];
            let mut rec = vec![r.name.clone()];
            rec.extend(vals.iter().map(|v| format!("{v:.6}")));
            w.write_record(&rec).map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}
