use super::Tensor;
use crate::{Error, Result};

/// A first-order optimizer over a fixed list of parameter tensors.
pub trait Optimizer {
    /// Applies one descent step `params -= update(grads)`.
    fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()>;

    fn learning_rate(&self) -> f64;
}

fn check_shapes(slots: &[Tensor], params: &[&mut Tensor], grads: &[Tensor]) -> Result<()> {
    if params.len() != slots.len() || grads.len() != slots.len() {
        return Err(Error::shape(format!(
            "optimizer tracks {} tensors, got {} params and {} grads",
            slots.len(),
            params.len(),
            grads.len()
        )));
    }
    for (i, ((s, p), g)) in slots.iter().zip(params).zip(grads).enumerate() {
        if s.shape() != p.shape() || s.shape() != g.shape() {
            return Err(Error::shape(format!(
                "tensor {i}: state {:?}, param {:?}, grad {:?}",
                s.shape(),
                p.shape(),
                g.shape()
            )));
        }
    }
    Ok(())
}

/// Adam with bias-corrected first and second moments.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    /// Defaults beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
    pub fn new<'a>(lr: f64, shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let m: Vec<Tensor> = shapes.into_iter().map(Tensor::zeros).collect();
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

impl Optimizer for AdamState {
    fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        check_shapes(&self.m, params, grads)?;
        // An all-zero gradient leaves parameters and moments untouched.
        if grads.iter().all(|g| g.data().iter().all(|&v| v == 0.0)) {
            return Ok(());
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }
}

/// RMSprop: running mean of squared gradients, no momentum.
#[derive(Debug, Clone)]
pub struct RmspropState {
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
    step: u64,
    sq: Vec<Tensor>,
}

impl RmspropState {
    /// Defaults decay = 0.9, eps = 1e-8.
    pub fn new<'a>(lr: f64, shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        RmspropState {
            lr,
            decay: 0.9,
            eps: 1e-8,
            step: 0,
            sq: shapes.into_iter().map(Tensor::zeros).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

impl Optimizer for RmspropState {
    fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        check_shapes(&self.sq, params, grads)?;
        self.step += 1;
        for ((p, g), s) in params.iter_mut().zip(grads).zip(self.sq.iter_mut()) {
            for ((pi, &gi), si) in p.data_mut().iter_mut().zip(g.data()).zip(s.data_mut()) {
                *si = self.decay * *si + (1.0 - self.decay) * gi * gi;
                if gi == 0.0 {
                    continue;
                }
                *pi -= self.lr * gi / (si.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> Tensor {
        Tensor::vector(vec![v])
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = Tensor::vector(vec![1.5, -2.0, 0.25]);
        let before = p.clone();
        let mut opt = AdamState::new(0.01, [p.shape()]);
        for _ in 0..10 {
            opt.step(&mut [&mut p], &[Tensor::zeros(&[3])]).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_hand_value() {
        // m̂ = g, v̂ = g², update = lr·g/(|g|+eps) ≈ lr
        let mut p = one_param(0.0);
        let mut opt = AdamState::new(0.01, [p.shape()]);
        opt.step(&mut [&mut p], &[one_param(1.0)]).unwrap();
        let expected = -0.01 * 1.0 / (1.0 + 1e-8);
        assert!((p.item() - expected).abs() < 1e-15);
    }

    #[test]
    fn adam_constant_gradient_update_tends_to_lr() {
        let mut p = one_param(0.0);
        let mut opt = AdamState::new(0.01, [p.shape()]);
        let mut last = 0.0;
        for _ in 0..5000 {
            let before = p.item();
            opt.step(&mut [&mut p], &[one_param(0.3)]).unwrap();
            last = before - p.item();
        }
        assert!((last - 0.01).abs() < 1e-6, "last update {last}");
    }

    #[test]
    fn rmsprop_first_step_hand_value() {
        // s = 0.1·g² = 0.1, update = lr/(sqrt(0.1)+eps)
        let mut p = one_param(0.0);
        let mut opt = RmspropState::new(0.01, [p.shape()]);
        opt.step(&mut [&mut p], &[one_param(1.0)]).unwrap();
        let expected = -0.01 / (0.1f64.sqrt() + 1e-8);
        assert!((p.item() - expected).abs() < 1e-15);
        assert!((p.item() + 0.0316).abs() < 1e-4);
    }

    #[test]
    fn rmsprop_steady_state_update_is_lr() {
        let mut p = one_param(0.0);
        let mut opt = RmspropState::new(0.01, [p.shape()]);
        let mut last = 0.0;
        for _ in 0..500 {
            let before = p.item();
            opt.step(&mut [&mut p], &[one_param(2.0)]).unwrap();
            last = before - p.item();
        }
        assert!((last - 0.01).abs() < 1e-9);
    }

    #[test]
    fn rmsprop_zero_gradient_is_noop() {
        let mut p = Tensor::vector(vec![3.0, 4.0]);
        let before = p.clone();
        let mut opt = RmspropState::new(0.1, [p.shape()]);
        opt.step(&mut [&mut p], &[Tensor::zeros(&[2])]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = Tensor::zeros(&[2]);
        let mut opt = AdamState::new(0.1, [p.shape()]);
        assert!(opt.step(&mut [&mut p], &[Tensor::zeros(&[3])]).is_err());
        let mut opt = RmspropState::new(0.1, [p.shape()]);
        assert!(opt.step(&mut [&mut p], &[]).is_err());
    }
}
