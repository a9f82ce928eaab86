use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::keyed_rng;
use crate::tensor::{Graph, Tensor, Var};

fn log_sum_exp(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Balanced soft assignment of `B` rows to `K` prototypes.
///
/// Starts from `exp(s / eps)` and alternates prototype (column) and
/// sample (row) normalisation so that columns carry `B/K` mass each and rows
/// sum to one. The returned rows always sum to one.
pub fn sinkhorn(scores: &Tensor, eps: f64, iters: usize) -> Result<Tensor> {
    if scores.rank() != 2 || scores.numel() == 0 {
        return Err(Error::Invalid(format!(
            "sinkhorn expects a non-empty B x K matrix, got {:?}",
            scores.shape()
        )));
    }
    if !(eps > 0.0) || iters == 0 {
        return Err(Error::Invalid(format!(
            "sinkhorn needs eps > 0 and iters >= 1, got {eps}, {iters}"
        )));
    }
    if !scores.is_finite() {
        return Err(Error::Invalid("sinkhorn scores must be finite".into()));
    }
    let (b, k) = (scores.shape()[0], scores.shape()[1]);
    // Log domain, so sharp scores cannot underflow a whole column.
    let mut lq: Vec<f64> = scores.data().iter().map(|s| s / eps).collect();
    let log_col_target = (b as f64 / k as f64).ln();
    for _ in 0..iters {
        for c in 0..k {
            let shift = log_col_target - log_sum_exp((0..b).map(|r| lq[r * k + c]));
            (0..b).for_each(|r| lq[r * k + c] += shift);
        }
        for row in lq.chunks_mut(k) {
            let shift = log_sum_exp(row.iter().copied());
            row.iter_mut().for_each(|v| *v -= shift);
        }
    }
    let q = lq.into_iter().map(f64::exp).collect();
    Ok(Tensor::new(vec![b, k], q)?)
}

/// Sinkhorn codes of the first `n_global` views, used as fixed targets.
pub fn swav_codes(g: &Graph, logits: &[Var], n_global: usize, eps: f64, iters: usize) -> Result<Vec<Tensor>> {
    logits
        .iter()
        .take(n_global)
        .map(|&l| sinkhorn(g.value(l), eps, iters))
        .collect()
}

/// Swapped prediction over prototype logits, one `B × K` tensor per view with
/// the global views first. Sinkhorn codes of each global view are targets for
/// the softmax predictions of every other view; the sum is scaled by `1/2N`
/// where `N` is the batch size.
pub fn swav_loss(g: &mut Graph, logits: &[Var], n_global: usize, tau: f64, eps: f64, iters: usize) -> Result<Var> {
    if n_global < 2 || logits.len() < n_global {
        return Err(Error::Invalid(format!(
            "swapped prediction needs at least 2 global views, got {n_global} of {}",
            logits.len()
        )));
    }
    let codes = swav_codes(g, logits, n_global, eps, iters)?;
    swav_loss_with_codes(g, logits, &codes, tau)
}

/// [`swav_loss`] with precomputed codes for the leading global views.
pub fn swav_loss_with_codes(g: &mut Graph, logits: &[Var], codes: &[Tensor], tau: f64) -> Result<Var> {
    if codes.len() < 2 || logits.len() < codes.len() {
        return Err(Error::Invalid(format!(
            "swapped prediction needs at least 2 global views, got {} of {}",
            codes.len(),
            logits.len()
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::Invalid(format!("temperature must be positive, got {tau}")));
    }
    let batch = g.value(logits[0]).shape()[0];
    let mut log_p = Vec::with_capacity(logits.len());
    for &l in logits {
        let scaled = g.div_scalar(l, tau)?;
        log_p.push(g.log_softmax(scaled, 1)?);
    }
    let mut total: Option<Var> = None;
    for (v, code) in codes.iter().enumerate() {
        let q = g.constant(code.clone())?;
        for (w, &lp) in log_p.iter().enumerate() {
            if w == v {
                continue;
            }
            let prod = g.mul(q, lp)?;
            let s = g.sum(prod)?;
            total = Some(match total {
                Some(acc) => g.add(acc, s)?,
                None => s,
            });
        }
    }
    let total = total.ok_or_else(|| Error::Invalid("no view pairs".into()))?;
    Ok(g.mul_scalar(total, -1.0 / (2 * batch) as f64)?)
}

/// Result of Lloyd's algorithm.
#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub labels: Vec<usize>,
    /// `K × D`.
    pub centroids: Tensor,
    /// Sum of squared distances to the assigned centroid after each assignment.
    pub objective: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding followed by Lloyd iterations until the assignment stops
/// changing or 100 iterations. An empty cluster is reseeded at the point
/// farthest from its current centroid.
pub fn kmeans(x: &Tensor, k: usize, seed: u64) -> Result<KMeans> {
    if x.rank() != 2 {
        return Err(Error::Invalid(format!(
            "kmeans expects n x D input, got {:?}",
            x.shape()
        )));
    }
    let (n, d) = (x.shape()[0], x.shape()[1]);
    if k == 0 || n < k {
        return Err(Error::Invalid(format!("kmeans needs 1 <= K <= n, got K={k}, n={n}")));
    }
    let mut rng = keyed_rng(seed, &[0x6b6d]);
    let mut centroids: Vec<Vec<f64>> = vec![x.row(rng.random_range(0..n)).to_vec()];
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut t = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if t < w {
                    chosen = i;
                    break;
                }
                t -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = x.row(pick).to_vec();
        for (i, m) in nearest.iter_mut().enumerate() {
            *m = m.min(sq_dist(x.row(i), &c));
        }
        centroids.push(c);
    }

    let assign = |centroids: &[Vec<f64>]| -> (Vec<usize>, Vec<f64>) {
        (0..n)
            .map(|i| {
                let (best, dist) = centroids
                    .iter()
                    .enumerate()
                    .map(|(c, cen)| (c, sq_dist(x.row(i), cen)))
                    .fold((0, f64::INFINITY), |acc, cur| if cur.1 < acc.1 { cur } else { acc });
                (best, dist)
            })
            .unzip()
    };

    let mut objective = Vec::new();
    let (mut labels, mut dists) = assign(&centroids);
    objective.push(dists.iter().sum());
    for _ in 0..100 {
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            sums[l].iter_mut().zip(x.row(i)).for_each(|(s, v)| *s += v);
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .unwrap_or(0);
                centroids[c] = x.row(far).to_vec();
                dists[far] = 0.0;
            }
        }
        let (next, nd) = assign(&centroids);
        objective.push(nd.iter().sum());
        let changed = next != labels;
        labels = next;
        dists = nd;
        if !changed {
            break;
        }
    }
    let centroids = Tensor::new(vec![k, d], centroids.concat())?;
    Ok(KMeans {
        labels,
        centroids,
        objective,
    })
}

/// Mean negative log-probability of each row's pseudo-label.
pub fn deepcluster_loss(g: &mut Graph, probs: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.value(probs).shape().to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::Invalid(format!(
            "expected {} x K probabilities, got {shape:?}",
            labels.len()
        )));
    }
    let k = shape[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Invalid(format!("label {bad} out of range for {k} clusters")));
    }
    let idx: Vec<usize> = labels.iter().enumerate().map(|(i, &l)| i * k + l).collect();
    let picked = g.gather(probs, &idx, &[labels.len()])?;
    // Floor for probabilities that underflowed to zero.
    let picked = g.add_scalar(picked, f64::MIN_POSITIVE)?;
    let logs = g.log(picked)?;
    let mean = g.mean(logs)?;
    Ok(g.neg(mean)?)
}
