//! Batch normalization with per-column presence masking.
//!
//! Columns belonging to a dropped group are forced to zero on output while
//! their running statistics and affine parameters stay untouched, so a
//! dropout round never contaminates the statistics the next rounds rely on.

use crate::qcode::RealMatrix;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormLayer {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

/// Forward-pass byproducts the backward pass needs.
#[derive(Debug, Clone)]
pub struct BnCache {
    normalized: RealMatrix,
    inv_std: Vec<f64>,
    present: Vec<bool>,
}

impl BatchNormLayer {
    pub fn new(width: usize) -> Self {
        BatchNormLayer {
            gamma: vec![1.0; width],
            beta: vec![0.0; width],
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn width(&self) -> usize {
        self.gamma.len()
    }

    /// Normalizes present columns; absent columns output zero and leave the
    /// running statistics unchanged. Training mode uses batch statistics
    /// (biased variance) and folds them into the running estimates.
    pub fn forward(
        &mut self,
        x: &RealMatrix,
        present: &[bool],
        training: bool,
    ) -> Result<(RealMatrix, BnCache)> {
        if present.len() != self.width() || x.cols != self.width() {
            return Err(Error::shape(
                format!("width {}", self.width()),
                format!("input {} / presence {}", x.cols, present.len()),
            ));
        }
        let b = x.rows;
        if training && b < 2 {
            return Err(Error::Protocol(
                "batch normalization needs at least 2 rows in training mode".into(),
            ));
        }
        let mut y = RealMatrix::zeros(b, self.width());
        let mut normalized = RealMatrix::zeros(b, self.width());
        let mut inv_std = vec![0.0; self.width()];

        for j in 0..self.width() {
            if !present[j] {
                continue;
            }
            let (mean, var) = if training {
                let mean = (0..b).map(|i| x.get(i, j)).sum::<f64>() / b as f64;
                let var = (0..b).map(|i| (x.get(i, j) - mean).powi(2)).sum::<f64>() / b as f64;
                self.running_mean[j] = (1.0 - self.momentum) * self.running_mean[j]
                    + self.momentum * mean;
                self.running_var[j] =
                    (1.0 - self.momentum) * self.running_var[j] + self.momentum * var;
                (mean, var)
            } else {
                (self.running_mean[j], self.running_var[j])
            };
            let istd = 1.0 / (var + self.eps).sqrt();
            inv_std[j] = istd;
            for i in 0..b {
                let xhat = (x.get(i, j) - mean) * istd;
                normalized.set(i, j, xhat);
                y.set(i, j, self.gamma[j] * xhat + self.beta[j]);
            }
        }
        Ok((y, BnCache { normalized, inv_std, present: present.to_vec() }))
    }

    /// Training-mode backward pass through the batch statistics. Absent
    /// columns produce zero gradients everywhere.
    pub fn backward(
        &self,
        cache: &BnCache,
        d_out: &RealMatrix,
    ) -> (RealMatrix, Vec<f64>, Vec<f64>) {
        let b = d_out.rows;
        let w = self.width();
        let mut d_x = RealMatrix::zeros(b, w);
        let mut d_gamma = vec![0.0; w];
        let mut d_beta = vec![0.0; w];

        for j in 0..w {
            if !cache.present[j] {
                continue;
            }
            let mut sum_d = 0.0;
            let mut sum_dxhat = 0.0;
            for i in 0..b {
                let d = d_out.get(i, j);
                sum_d += d;
                sum_dxhat += d * cache.normalized.get(i, j);
            }
            d_beta[j] = sum_d;
            d_gamma[j] = sum_dxhat;
            let scale = self.gamma[j] * cache.inv_std[j] / b as f64;
            for i in 0..b {
                let d = d_out.get(i, j);
                let xhat = cache.normalized.get(i, j);
                d_x.set(i, j, scale * (b as f64 * d - sum_d - xhat * sum_dxhat));
            }
        }
        (d_x, d_gamma, d_beta)
    }

    pub fn apply_sgd(&mut self, d_gamma: &[f64], d_beta: &[f64], lr: f64) {
        for j in 0..self.width() {
            self.gamma[j] -= lr * d_gamma[j];
            self.beta[j] -= lr * d_beta[j];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn all_present(w: usize) -> Vec<bool> {
        vec![true; w]
    }

    #[test]
    fn training_normalizes_present_columns() {
        let mut bn = BatchNormLayer::new(2);
        let x = RealMatrix::from_vec(4, 2, vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0, 4.0, 40.0]);
        let (y, _) = bn.forward(&x, &all_present(2), true).unwrap();
        for j in 0..2 {
            let mean: f64 = (0..4).map(|i| y.get(i, j)).sum::<f64>() / 4.0;
            let var: f64 = (0..4).map(|i| (y.get(i, j) - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3, "variance {} should be ~1 up to eps", var);
        }
    }

    #[test]
    fn absent_columns_zeroed_and_stats_frozen() {
        let mut bn = BatchNormLayer::new(3);
        let before_mean = bn.running_mean.clone();
        let before_var = bn.running_var.clone();
        let x = RealMatrix::from_vec(2, 3, vec![5.0, 7.0, 9.0, 6.0, 8.0, 10.0]);
        let present = vec![true, false, true];
        let (y, _) = bn.forward(&x, &present, true).unwrap();
        assert_eq!(y.get(0, 1), 0.0);
        assert_eq!(y.get(1, 1), 0.0);
        assert_eq!(bn.running_mean[1], before_mean[1]);
        assert_eq!(bn.running_var[1], before_var[1]);
        assert_ne!(bn.running_mean[0], before_mean[0]);
    }

    #[test]
    fn inference_uses_running_statistics() {
        let mut bn = BatchNormLayer::new(1);
        bn.momentum = 1.0; // take the batch statistics outright
        let train = RealMatrix::from_vec(4, 1, vec![2.0, 4.0, 6.0, 8.0]);
        bn.forward(&train, &all_present(1), true).unwrap();
        // mean 5, biased var 5.
        assert!((bn.running_mean[0] - 5.0).abs() < 1e-12);
        assert!((bn.running_var[0] - 5.0).abs() < 1e-12);

        let test = RealMatrix::from_vec(1, 1, vec![5.0]);
        let (y, _) = bn.forward(&test, &all_present(1), false).unwrap();
        assert!(y.get(0, 0).abs() < 1e-9, "running mean input should map to ~0");

        let test2 = RealMatrix::from_vec(1, 1, vec![10.0]);
        let (y2, _) = bn.forward(&test2, &all_present(1), false).unwrap();
        let expect = 5.0 / (5.0 + bn.eps).sqrt();
        assert!((y2.get(0, 0) - expect).abs() < 1e-9);
    }

    #[test]
    fn training_rejects_single_row_batches() {
        let mut bn = BatchNormLayer::new(2);
        let x = RealMatrix::from_vec(1, 2, vec![1.0, 2.0]);
        assert!(bn.forward(&x, &all_present(2), true).is_err());
        assert!(bn.forward(&x, &all_present(2), false).is_ok());
    }

    #[test]
    fn masked_columns_never_emit_nan() {
        let mut bn = BatchNormLayer::new(2);
        let x = RealMatrix::from_vec(2, 2, vec![f64::NAN, 1.0, f64::NAN, 2.0]);
        let present = vec![false, true];
        let (y, _) = bn.forward(&x, &present, true).unwrap();
        assert!(y.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut bn = BatchNormLayer::new(2);
        bn.gamma = vec![1.3, 0.7];
        bn.beta = vec![0.2, -0.4];
        let x = RealMatrix::from_vec(4, 2, vec![0.5, -1.0, 1.5, 2.0, -0.5, 0.3, 2.5, -1.7]);
        let present = all_present(2);

        let loss_of = |bn: &BatchNormLayer, x: &RealMatrix| -> f64 {
            let mut probe = bn.clone();
            let (y, _) = probe.forward(x, &[true, true], true).unwrap();
            y.data.iter().map(|v| v * v).sum()
        };

        let (y, cache) = bn.clone().forward(&x, &present, true).unwrap();
        let (d_x, d_gamma, d_beta) = bn.backward(&cache, &y.scale(2.0));

        let h = 1e-5;
        for slot in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[slot] += h;
            let mut xm = x.clone();
            xm.data[slot] -= h;
            let numeric = (loss_of(&bn, &xp) - loss_of(&bn, &xm)) / (2.0 * h);
            let denom = numeric.abs().max(d_x.data[slot].abs()).max(1e-6);
            assert!(
                (numeric - d_x.data[slot]).abs() / denom < 1e-3,
                "d_x[{}]: analytic {} numeric {}",
                slot,
                d_x.data[slot],
                numeric
            );
        }
        for j in 0..2 {
            let mut bp = bn.clone();
            bp.gamma[j] += h;
            let mut bm = bn.clone();
            bm.gamma[j] -= h;
            let numeric = (loss_of(&bp, &x) - loss_of(&bm, &x)) / (2.0 * h);
            assert!((numeric - d_gamma[j]).abs() / numeric.abs().max(1e-6) < 1e-3);

            let mut bp = bn.clone();
            bp.beta[j] += h;
            let mut bm = bn.clone();
            bm.beta[j] -= h;
            let numeric = (loss_of(&bp, &x) - loss_of(&bm, &x)) / (2.0 * h);
            assert!((numeric - d_beta[j]).abs() / numeric.abs().max(1e-6) < 1e-3);
        }
    }
}
