use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// One momentum step on raw tensors: `v ← m·v − lr·g; p ← p + v`.
pub fn sgd_step(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    velocity: &mut [Tensor],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::invalid(format!("learning rate must be > 0, got {lr}")));
    }
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::invalid("sgd_step: parameter, gradient and velocity counts differ"));
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::Shape {
                op: "sgd_step",
                left: p.shape(),
                right: g.shape(),
            });
        }
        for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = momentum * *vv - lr * gv;
            *pv += *vv;
        }
    }
    Ok(())
}

/// SGD with momentum over every parameter of a store, with optional global
/// gradient-norm clipping and per-epoch exponential learning-rate decay.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub clip_norm: Option<f64>,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(store: &ParamStore, lr: f64, momentum: f64) -> Self {
        let velocity = store
            .params()
            .iter()
            .map(|p| Tensor::zeros(p.value.rows(), p.value.cols()))
            .collect();
        Self {
            lr,
            momentum,
            clip_norm: None,
            velocity,
        }
    }

    pub fn with_clip_norm(mut self, clip: Option<f64>) -> Self {
        self.clip_norm = clip;
        self
    }

    /// Applies accumulated gradients, then zeroes them.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if let Some(clip) = self.clip_norm {
            let norm = store.grad_norm();
            if norm > clip {
                store.scale_grads(clip / norm);
            }
        }
        let ids: Vec<_> = store.ids().collect();
        for (id, v) in ids.into_iter().zip(self.velocity.iter_mut()) {
            let p = store.get_mut(id);
            let g = p.grad.clone();
            sgd_step(
                &mut [&mut p.value],
                &[&g],
                std::slice::from_mut(v),
                self.lr,
                self.momentum,
            )?;
        }
        store.zero_grads();
        Ok(())
    }

    pub fn decay(&mut self, factor: f64) {
        self.lr *= factor;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step_scalar(p: f64, g: f64, v: &mut Tensor, lr: f64, m: f64) -> f64 {
        let mut pt = Tensor::scalar(p);
        sgd_step(&mut [&mut pt], &[&Tensor::scalar(g)], std::slice::from_mut(v), lr, m).unwrap();
        pt.item()
    }

    #[test]
    fn plain_gradient_step() {
        let mut v = Tensor::scalar(0.0);
        assert!((step_scalar(1.0, 1.0, &mut v, 0.1, 0.0) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut v = Tensor::scalar(0.0);
        assert_eq!(step_scalar(0.7, 0.0, &mut v, 0.1, 0.0), 0.7);
    }

    #[test]
    fn momentum_recurrence() {
        // v1 = -0.1, p1 = -0.1; v2 = 0.9·(-0.1) - 0.1 = -0.19, p2 = -0.29
        let mut v = Tensor::scalar(0.0);
        let p1 = step_scalar(0.0, 1.0, &mut v, 0.1, 0.9);
        let p2 = step_scalar(p1, 1.0, &mut v, 0.1, 0.9);
        assert!((p1 + 0.1).abs() < 1e-15);
        assert!((p2 + 0.29).abs() < 1e-15);
    }

    #[test]
    fn rejects_nonpositive_lr_and_shape_mismatch() {
        let mut v = Tensor::scalar(0.0);
        let mut p = Tensor::scalar(0.0);
        assert!(sgd_step(&mut [&mut p], &[&Tensor::scalar(1.0)], std::slice::from_mut(&mut v), 0.0, 0.0).is_err());
        assert!(sgd_step(&mut [&mut p], &[&Tensor::zeros(2, 1)], std::slice::from_mut(&mut v), 0.1, 0.0).is_err());
    }
}
