use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::{Error, Result};

/// Scale/shift parameters and running statistics of a batch-norm layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    pub fn new(features: usize) -> Self {
        BatchNormState {
            gamma: Tensor::filled(&[features], 1.0),
            beta: Tensor::zeros(&[features]),
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn features(&self) -> usize {
        self.running_mean.len()
    }

    /// Folds one batch's statistics into the running averages.
    pub fn update_running(&mut self, mean: &[f64], var: &[f64]) {
        let m = self.momentum;
        for (r, v) in self.running_mean.iter_mut().zip(mean) {
            *r = (1.0 - m) * *r + m * v;
        }
        for (r, v) in self.running_var.iter_mut().zip(var) {
            *r = ((1.0 - m) * *r + m * v).max(0.0);
        }
    }
}

/// Batch normalization of the columns of `x [batch × features]`.
///
/// In training mode the batch's own statistics are used and folded into the
/// running averages; otherwise the running averages are used.
pub fn batch_norm(x: &Tensor, state: &mut BatchNormState, training: bool) -> Result<Tensor> {
    let (n, f) = (x.rows(), x.cols());
    if f != state.features() {
        return Err(Error::shape(format!(
            "batch norm over {} features applied to {:?}",
            state.features(),
            x.shape()
        )));
    }
    let (mean, var) = if training {
        if n < 2 {
            return Err(Error::contract(
                "batch normalization in training mode needs a batch of at least 2",
            ));
        }
        let mut mean = vec![0.0; f];
        for row in x.data().chunks(f) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; f];
        for row in x.data().chunks(f) {
            for j in 0..f {
                var[j] += (row[j] - mean[j]).powi(2);
            }
        }
        var.iter_mut().for_each(|v| *v /= n as f64);
        state.update_running(&mean, &var);
        (mean, var)
    } else {
        (state.running_mean.clone(), state.running_var.clone())
    };
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(f) {
        for j in 0..f {
            let xh = (row[j] - mean[j]) / (var[j] + state.eps).sqrt();
            row[j] = state.gamma.data()[j] * xh + state.beta.data()[j];
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_column_maps_to_shift() {
        let mut st = BatchNormState::new(1);
        st.beta = Tensor::vector(vec![0.7]);
        let x = Tensor::from_rows(&[&[4.0], &[4.0], &[4.0]]);
        let y = batch_norm(&x, &mut st, true).unwrap();
        assert!(y.data().iter().all(|v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn standardized_column_is_unchanged() {
        let mut st = BatchNormState::new(1);
        let x = Tensor::from_rows(&[&[-1.0], &[1.0]]);
        let y = batch_norm(&x, &mut st, true).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-5);
    }

    #[test]
    fn hand_case_and_running_update() {
        let mut st = BatchNormState::new(1);
        let x = Tensor::from_rows(&[&[1.0], &[3.0]]);
        let y = batch_norm(&x, &mut st, true).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-5);
        assert!((y.data()[1] - 1.0).abs() < 1e-5);
        assert!((st.running_mean[0] - 0.2).abs() < 1e-15);
        assert!((st.running_var[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn inference_uses_running_stats_and_leaves_them_alone() {
        let mut st = BatchNormState::new(2);
        st.running_mean = vec![1.0, -1.0];
        st.running_var = vec![4.0, 1.0];
        let before = st.clone();
        let x = Tensor::from_rows(&[&[3.0, 0.0]]);
        let y = batch_norm(&x, &mut st, false).unwrap();
        assert!((y.data()[0] - 2.0 / (4.0f64 + 1e-5).sqrt()).abs() < 1e-12);
        assert_eq!(st, before);
    }

    #[test]
    fn training_batch_of_one_is_rejected() {
        let mut st = BatchNormState::new(1);
        let x = Tensor::from_rows(&[&[1.0]]);
        assert!(matches!(batch_norm(&x, &mut st, true), Err(Error::Contract(_))));
    }
}
