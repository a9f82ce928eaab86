use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Reference count.
    pub support: usize,
}

fn check(pred: &[usize], reference: &[usize], c: usize) -> Result<()> {
    if pred.len() != reference.len() {
        return Err(Error::Invalid(format!(
            "prediction length {} differs from reference length {}",
            pred.len(),
            reference.len()
        )));
    }
    if let Some(&bad) = pred.iter().chain(reference).find(|&&l| l >= c) {
        return Err(Error::Invalid(format!("label {bad} outside 0..{c}")));
    }
    Ok(())
}

/// `m[r][p]` counts samples with reference `r` predicted as `p`.
pub fn confusion(pred: &[usize], reference: &[usize], c: usize) -> Result<Vec<Vec<usize>>> {
    check(pred, reference, c)?;
    let mut m = vec![vec![0; c]; c];
    for (&p, &r) in pred.iter().zip(reference) {
        m[r][p] += 1;
    }
    Ok(m)
}

/// Precision, recall and F1 per class; a zero denominator yields 0.
pub fn per_class(pred: &[usize], reference: &[usize], c: usize) -> Result<Vec<ClassMetrics>> {
    let m = confusion(pred, reference, c)?;
    Ok((0..c)
        .map(|k| {
            let tp = m[k][k] as f64;
            let support: usize = m[k].iter().sum();
            let predicted: usize = m.iter().map(|row| row[k]).sum();
            let ratio = |a: f64, b: usize| if b == 0 { 0.0 } else { a / b as f64 };
            let (precision, recall) = (ratio(tp, predicted), ratio(tp, support));
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassMetrics {
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect())
}

/// Unweighted mean F1 over all `c` classes, absent ones included as 0.
pub fn macro_f1(pred: &[usize], reference: &[usize], c: usize) -> Result<f64> {
    if c == 0 {
        return Err(Error::Invalid("macro-F1 needs at least one class".into()));
    }
    let pc = per_class(pred, reference, c)?;
    Ok(pc.iter().map(|m| m.f1).sum::<f64>() / c as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_examples() {
        let f = macro_f1(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
        assert!((f - 11.0 / 15.0).abs() < 1e-15);
        let f = macro_f1(&[1, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
        assert!((f - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(macro_f1(&[2, 0, 1], &[2, 0, 1], 3).unwrap(), 1.0);
        assert_eq!(confusion(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap(), [[1, 1], [0, 2]]);
    }

    #[test]
    fn invalid_inputs() {
        assert!(macro_f1(&[0], &[0, 1], 2).is_err());
        assert!(confusion(&[0, 2], &[0, 1], 2).is_err());
    }

    #[test]
    fn absent_class_counts_as_zero() {
        // Class 2 never appears and is never predicted.
        let f = macro_f1(&[0, 1], &[0, 1], 3).unwrap();
        assert!((f - 2.0 / 3.0).abs() < 1e-15);
    }
}
