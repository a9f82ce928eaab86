use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

/// Cosine similarity of two non-zero vectors.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Invalid(format!("length mismatch: {} vs {}", a.len(), b.len())));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Invalid("cosine similarity of a zero vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Flat indices into a `2N × 2N` matrix selecting, for each row `i`, the
/// positive column `(i + N) mod 2N` first and then every other `j != i` in order.
pub fn similarity_index_map(rows: usize) -> Result<Vec<usize>> {
    if rows == 0 || !rows.is_multiple_of(2) {
        return Err(Error::Invalid(format!(
            "similarity matrix needs an even, non-zero row count, got {rows}"
        )));
    }
    let n = rows / 2;
    let mut idx = Vec::with_capacity(rows * (rows - 1));
    for i in 0..rows {
        let pos = (i + n) % rows;
        idx.push(i * rows + pos);
        idx.extend((0..rows).filter(|&j| j != i && j != pos).map(|j| i * rows + j));
    }
    Ok(idx)
}

/// `2N × (2N-1)` cosine matrix: column 0 is the positive, then the negatives.
/// Rows `0..N` hold the first views and `N..2N` the second.
pub fn build_similarity_matrix(g: &mut Graph, z: Var) -> Result<Var> {
    let shape = g.value(z).shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::Invalid(format!("expected a 2-D latent batch, got {shape:?}")));
    }
    let rows = shape[0];
    let idx = similarity_index_map(rows)?;
    let zn = g.l2_normalize(z, 1)?;
    let zt = g.transpose(zn)?;
    let full = g.matmul(zn, zt)?;
    Ok(g.gather(full, &idx, &[rows, rows - 1])?)
}

/// Mean over rows of `-log softmax(M / tau)[:, 0]`.
pub fn nt_xent(g: &mut Graph, m: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Invalid(format!("temperature must be positive, got {tau}")));
    }
    let scaled = g.div_scalar(m, tau)?;
    let ls = g.log_softmax(scaled, 1)?;
    let pos = g.slice(ls, 1, 0, 1)?;
    let mean = g.mean(pos)?;
    Ok(g.neg(mean)?)
}

/// Per-row cosine similarity of two equally shaped `B × D` batches, shape `[B]`.
pub fn rowwise_cosine(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let (sa, sb) = (g.value(a).shape(), g.value(b).shape());
    if sa != sb || sa.len() != 2 {
        return Err(Error::Invalid(format!("dimension mismatch: {sa:?} vs {sb:?}")));
    }
    let an = g.l2_normalize(a, 1)?;
    let bn = g.l2_normalize(b, 1)?;
    let prod = g.mul(an, bn)?;
    Ok(g.sum_axis(prod, 1)?)
}

/// Symmetric negative cosine between predictions and stop-gradient projections.
pub fn simsiam_loss(g: &mut Graph, p1: Var, z1: Var, p2: Var, z2: Var) -> Result<Var> {
    let (z1s, z2s) = (g.stop_gradient(z1), g.stop_gradient(z2));
    let a = rowwise_cosine(g, p1, z2s)?;
    let b = rowwise_cosine(g, p2, z1s)?;
    let (a, b) = (g.mean(a)?, g.mean(b)?);
    let s = g.add(a, b)?;
    Ok(g.mul_scalar(s, -0.5)?)
}
