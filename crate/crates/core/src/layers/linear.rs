use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::Result;

/// Fully connected layer `x W + b` applied row-wise (a 1×1 convolution on
/// point features).
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

/// Normal samples with standard deviation `std`.
pub fn normal_tensor<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Tensor {
    let mut t = Tensor::zeros(rows, cols);
    for v in t.data_mut() {
        *v = std * rng.sample::<f64, _>(StandardNormal);
    }
    t
}

impl Linear {
    /// Kaiming-normal weights (`std = √(2/in)`), zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let w = normal_tensor(in_dim, out_dim, (2.0 / in_dim as f64).sqrt(), rng);
        let b = bias.then(|| Tensor::zeros(1, out_dim));
        Self::with_values(store, name, w, b)
    }

    pub fn with_values(store: &mut ParamStore, name: &str, weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        let (in_dim, out_dim) = weight.shape();
        let weight = store.add(format!("{name}.weight"), weight)?;
        let bias = match bias {
            Some(b) => Some(store.add(format!("{name}.bias"), b)?),
            None => None,
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let mut y = tape.matmul(x, w)?;
        if let Some(b) = self.bias {
            let b = tape.param(store, b);
            y = tape.add_row(y, b)?;
        }
        Ok(y)
    }

    /// Plain evaluation without a tape.
    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut y = x.matmul(store.value(self.weight))?;
        if let Some(b) = self.bias {
            let b = store.value(b);
            for r in 0..y.rows() {
                for (v, bv) in y.row_mut(r).iter_mut().zip(b.data()) {
                    *v += bv;
                }
            }
        }
        Ok(y)
    }
}
