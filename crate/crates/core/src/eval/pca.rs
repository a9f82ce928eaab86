use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `[D, d]`, orthonormal columns ordered by decreasing eigenvalue.
    pub components: Tensor,
    /// Share of total variance carried by each retained component.
    pub explained: Vec<f64>,
}

impl PcaModel {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.components.shape()[1]
    }
}

pub(crate) fn to_matrix(x: &Tensor) -> Result<DMatrix<f64>> {
    if x.rank() != 2 {
        return Err(Error::Invalid(format!("expected a matrix, got shape {:?}", x.shape())));
    }
    Ok(DMatrix::from_row_slice(x.shape()[0], x.shape()[1], x.data()))
}

pub(crate) fn from_matrix(m: &DMatrix<f64>) -> Tensor {
    let data = m
        .row_iter()
        .flat_map(|r| r.iter().copied().collect::<Vec<_>>())
        .collect();
    Tensor::new(vec![m.nrows(), m.ncols()], data).expect("matrix shape")
}

/// Eigendecomposition of the sample covariance of `x` (`[n, D]`), keeping
/// the top `d` directions. Each component's sign is fixed so that its largest
/// entry is positive.
pub fn pca_fit(x: &Tensor, d: usize) -> Result<PcaModel> {
    let m = to_matrix(x)?;
    let (n, dim) = m.shape();
    if n <= 1 {
        return Err(Error::Invalid(format!("PCA needs at least 2 samples, got {n}")));
    }
    if d == 0 || d > dim {
        return Err(Error::Invalid(format!("PCA dimension {d} must lie in 1..={dim}")));
    }
    if n <= d {
        return Err(Error::Invalid(format!(
            "PCA to {d} dimensions needs more than {d} samples, got {n}"
        )));
    }
    let mean: Vec<f64> = m.column_iter().map(|c| c.mean()).collect();
    let mut centred = m;
    for (j, mu) in mean.iter().enumerate() {
        centred.column_mut(j).add_scalar_mut(-mu);
    }
    let cov = centred.tr_mul(&centred) / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let mut comps = DMatrix::zeros(dim, d);
    let mut explained = Vec::with_capacity(d);
    for (k, &idx) in order.iter().take(d).enumerate() {
        let mut col = eig.eigenvectors.column(idx).into_owned();
        let pivot = col
            .iter()
            .copied()
            .fold(0.0_f64, |a, v| if v.abs() > a.abs() { v } else { a });
        if pivot < 0.0 {
            col.neg_mut();
        }
        comps.set_column(k, &col);
        let ev = eig.eigenvalues[idx].max(0.0);
        explained.push(if total > 0.0 { ev / total } else { 0.0 });
    }
    Ok(PcaModel {
        mean,
        components: from_matrix(&comps),
        explained,
    })
}

/// `(x - mean) · components`.
pub fn pca_apply(model: &PcaModel, x: &Tensor) -> Result<Tensor> {
    let mut m = to_matrix(x)?;
    if m.ncols() != model.input_dim() {
        return Err(Error::Invalid(format!(
            "PCA fitted on {} dimensions, got {}",
            model.input_dim(),
            m.ncols()
        )));
    }
    for (j, mu) in model.mean.iter().enumerate() {
        m.column_mut(j).add_scalar_mut(-mu);
    }
    Ok(from_matrix(&(m * to_matrix(&model.components)?)))
}
