//! Cross-entropy losses with numerically stable log-sum-exp, averaged over
//! the batch so per-client partial gradients over disjoint rows sum exactly
//! to the full-batch gradient.

use crate::qcode::RealMatrix;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    /// Single logit column, sigmoid cross-entropy.
    Binary,
    /// One logit column per class, softmax cross-entropy.
    Multiclass(usize),
}

/// Mean cross-entropy over the batch plus the logit gradient
/// (`(sigmoid - y) / B` or `(softmax - onehot) / B`).
pub fn loss_and_grad(
    logits: &RealMatrix,
    labels: &[u32],
    task: Task,
) -> Result<(f64, RealMatrix)> {
    if logits.rows != labels.len() {
        return Err(Error::shape(
            format!("{} label rows", logits.rows),
            format!("{}", labels.len()),
        ));
    }
    let b = logits.rows as f64;
    match task {
        Task::Binary => {
            if logits.cols != 1 {
                return Err(Error::shape("1 logit column", format!("{}", logits.cols)));
            }
            let mut loss = 0.0;
            let mut grad = RealMatrix::zeros(logits.rows, 1);
            for (i, &label) in labels.iter().enumerate() {
                if label > 1 {
                    return Err(Error::Data(format!(
                        "binary label {} out of range at row {}",
                        label, i
                    )));
                }
                let z = logits.get(i, 0);
                let y = label as f64;
                loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
                let sig = 1.0 / (1.0 + (-z).exp());
                grad.set(i, 0, (sig - y) / b);
            }
            Ok((loss / b, grad))
        }
        Task::Multiclass(n) => {
            if logits.cols != n {
                return Err(Error::shape(format!("{} logit columns", n), format!("{}", logits.cols)));
            }
            let mut loss = 0.0;
            let mut grad = RealMatrix::zeros(logits.rows, n);
            for (i, &label) in labels.iter().enumerate() {
                if label as usize >= n {
                    return Err(Error::Data(format!(
                        "class label {} out of range at row {}",
                        label, i
                    )));
                }
                let row = logits.row(i);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum_exp: f64 = row.iter().map(|z| (z - max).exp()).sum();
                let log_z = max + sum_exp.ln();
                loss += log_z - row[label as usize];
                for j in 0..n {
                    let p = (row[j] - log_z).exp();
                    let y = if j == label as usize { 1.0 } else { 0.0 };
                    grad.set(i, j, (p - y) / b);
                }
            }
            Ok((loss / b, grad))
        }
    }
}
