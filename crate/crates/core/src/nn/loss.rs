use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Mean softmax cross-entropy over the batch.
///
/// Returns the loss and `d loss / d logits = (softmax - onehot) / batch`.
pub fn cross_entropy(logits: &Matrix, labels: &[u32]) -> Result<(f32, Matrix)> {
    let (batch, classes) = logits.shape();
    if labels.len() != batch {
        return Err(Error::Shape(format!(
            "{} labels for {batch} rows of logits",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::Label { label: bad, classes });
    }
    let mut grad = Matrix::zeros(batch, classes);
    let mut total = 0.0f64;
    let inv_b = 1.0 / batch as f32;
    for (r, &label) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        let sum: f64 = row.iter().map(|&v| f64::from(v - max).exp()).sum();
        let log_z = f64::from(max) + sum.ln();
        total += log_z - f64::from(row[label as usize]);
        for (c, g) in grad.row_mut(r).iter_mut().enumerate() {
            let p = (f64::from(row[c]) - log_z).exp() as f32;
            let onehot = if c == label as usize { 1.0 } else { 0.0 };
            *g = (p - onehot) * inv_b;
        }
    }
    Ok(((total / batch as f64) as f32, grad))
}

/// Number of rows whose argmax (first on ties) equals the label.
pub fn accuracy(logits: &Matrix, labels: &[u32]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|(r, &label)| {
            let row = logits.row(*r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best == label as usize
        })
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_two_class_is_ln2() {
        let (loss, _) = cross_entropy(&Matrix::zeros(4, 2), &[0, 1, 1, 0]).unwrap();
        assert!((loss - std::f32::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn saturated_correct_logit() {
        let logits = Matrix::from_rows(&[&[30.0, 0.0, 0.0], &[0.0, 0.0, 30.0]]);
        let (loss, _) = cross_entropy(&logits, &[0, 2]).unwrap();
        assert!(loss < 1e-9, "{loss}");
    }

    #[test]
    fn label_out_of_range() {
        let err = cross_entropy(&Matrix::zeros(1, 2), &[2]).unwrap_err();
        assert!(matches!(err, Error::Label { label: 2, classes: 2 }));
    }

    #[test]
    fn gradient_rows_sum_to_zero() {
        let logits = Matrix::from_rows(&[&[1.0, -2.0, 0.5], &[0.0, 3.0, -1.0]]);
        let (_, g) = cross_entropy(&logits, &[2, 1]).unwrap();
        for r in 0..2 {
            assert!(g.row(r).iter().sum::<f32>().abs() < 1e-7);
        }
    }

    #[test]
    fn accuracy_counts_argmax() {
        let logits = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[2.0, 2.0]]);
        assert_eq!(accuracy(&logits, &[0, 0, 0]), 2);
    }
}
