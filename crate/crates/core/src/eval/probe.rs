use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::pca::{from_matrix, to_matrix};
use crate::error::{Error, Result};
use crate::rng::keyed_rng;
use crate::tensor::Tensor;

const SPLIT_STREAM: u64 = 0x5350;

/// Row indices of the probe's training and evaluation sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub seed: u64,
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
}

/// Per class, a keyed shuffle puts `round(train_fraction · n_c)` samples in
/// training, at least one and at most `n_c - 1`. Both index lists are sorted.
pub fn stratified_split(labels: &[usize], n_classes: usize, train_fraction: f64, seed: u64) -> Result<Split> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train_fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let mut by_class = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class
            .get_mut(l)
            .ok_or_else(|| Error::Invalid(format!("label {l} outside 0..{n_classes}")))?
            .push(i);
    }
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for (c, mut members) in by_class.into_iter().enumerate() {
        let n = members.len();
        if n == 0 {
            continue;
        }
        if n < 2 {
            return Err(Error::Invalid(format!(
                "class {c} has {n} sample; at least 2 are needed to split"
            )));
        }
        members.shuffle(&mut keyed_rng(seed, &[SPLIT_STREAM, c as u64]));
        let k = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
        train.extend_from_slice(&members[..k]);
        eval.extend_from_slice(&members[k..]);
    }
    train.sort_unstable();
    eval.sort_unstable();
    Ok(Split { seed, train, eval })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Full-batch gradient iterations.
    pub iterations: usize,
    /// L2 penalty on the weights (not the bias).
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            l2: 1e-3,
        }
    }
}

/// Multinomial logistic regression on standardised features.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeModel {
    /// `[d, C]`.
    pub weights: Tensor,
    pub bias: Vec<f64>,
    pub feature_mean: Vec<f64>,
    pub feature_scale: Vec<f64>,
    pub iterations: usize,
    /// Step size, set from the curvature bound of the training data.
    pub lr: f64,
    pub l2: f64,
}

impl ProbeModel {
    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    fn standardise(&self, x: &Tensor) -> Result<DMatrix<f64>> {
        let mut m = to_matrix(x)?;
        if m.ncols() != self.feature_mean.len() {
            return Err(Error::Invalid(format!(
                "probe expects {} features, got {}",
                self.feature_mean.len(),
                m.ncols()
            )));
        }
        for j in 0..m.ncols() {
            let (mu, s) = (self.feature_mean[j], self.feature_scale[j]);
            m.column_mut(j).apply(|v| *v = (*v - mu) / s);
        }
        Ok(m)
    }

    /// Class scores `[n, C]`.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let m = self.standardise(x)?;
        let mut z = m * to_matrix(&self.weights)?;
        for mut row in z.row_iter_mut() {
            for (v, b) in row.iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(from_matrix(&z))
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let z = self.logits(x)?;
        Ok((0..z.shape()[0])
            .map(|r| {
                let row = z.row(r);
                (0..row.len()).fold(0, |best, k| if row[k] > row[best] { k } else { best })
            })
            .collect())
    }
}

fn softmax_rows(z: &mut DMatrix<f64>) {
    for mut row in z.row_iter_mut() {
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let s = row.sum();
        row /= s;
    }
}

/// Fits on the rows of `x` listed in `rows`, with Nesterov-accelerated
/// gradient descent on mean cross-entropy plus `l2/2 · ‖W‖²`.
pub fn probe_train(
    x: &Tensor,
    labels: &[usize],
    rows: &[usize],
    n_classes: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeModel> {
    if labels.len() != x.shape().first().copied().unwrap_or(0) {
        return Err(Error::Invalid(format!(
            "{} labels for {:?} latents",
            labels.len(),
            x.shape()
        )));
    }
    let mut present: Vec<usize> = rows.iter().map(|&r| labels[r]).collect();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(Error::Invalid("probe training needs at least 2 classes".into()));
    }
    if let Some(&bad) = present.iter().find(|&&l| l >= n_classes) {
        return Err(Error::Invalid(format!("label {bad} outside 0..{n_classes}")));
    }
    if cfg.iterations == 0 || !(cfg.l2 >= 0.0) {
        return Err(Error::Config("probe needs iterations > 0 and l2 >= 0".into()));
    }
    let full = to_matrix(x)?;
    let d = full.ncols();
    let n = rows.len();
    let xs = DMatrix::from_fn(n, d, |i, j| full[(rows[i], j)]);
    let feature_mean: Vec<f64> = xs.column_iter().map(|c| c.mean()).collect();
    let feature_scale: Vec<f64> = xs
        .column_iter()
        .zip(&feature_mean)
        .map(|(c, mu)| {
            let var = c.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n as f64;
            if var > 1e-24 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let mut model = ProbeModel {
        weights: Tensor::zeros(vec![d, n_classes]),
        bias: vec![0.0; n_classes],
        feature_mean,
        feature_scale,
        iterations: cfg.iterations,
        lr: 0.0,
        l2: cfg.l2,
    };
    let xs = model.standardise(&from_matrix(&xs))?;
    let mut y = DMatrix::zeros(n, n_classes);
    for (i, &r) in rows.iter().enumerate() {
        y[(i, labels[r])] = 1.0;
    }

    // Softmax cross-entropy has Hessian bounded by 1/2 · XᵀX/n per class.
    let gram = xs.tr_mul(&xs) / n as f64;
    let top = SymmetricEigen::new(gram).eigenvalues.max().max(0.0);
    let lr = 1.0 / (0.5 * (top + 1.0) + cfg.l2);
    model.lr = lr;

    let mut w = DMatrix::<f64>::zeros(d, n_classes);
    let mut b = DVector::<f64>::zeros(n_classes);
    let (mut w_prev, mut b_prev) = (w.clone(), b.clone());
    for t in 0..cfg.iterations {
        let mom = t as f64 / (t as f64 + 3.0);
        let wl = &w + (&w - &w_prev) * mom;
        let bl = &b + (&b - &b_prev) * mom;
        let mut p = &xs * &wl;
        for mut row in p.row_iter_mut() {
            row += bl.transpose();
        }
        softmax_rows(&mut p);
        let r = (p - &y) / n as f64;
        let gw = xs.tr_mul(&r) + &wl * cfg.l2;
        let gb: DVector<f64> = r.row_sum().transpose();
        w_prev = std::mem::replace(&mut w, wl - gw * lr);
        b_prev = std::mem::replace(&mut b, bl - gb * lr);
    }
    model.weights = from_matrix(&w);
    model.bias = b.iter().copied().collect();
    Ok(model)
}
