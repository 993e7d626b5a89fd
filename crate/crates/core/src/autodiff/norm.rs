use super::params::{BufferId, ParamId, ParamStore};
use super::tape::{NormMode, StatUpdate, Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

pub const BN_EPS: f64 = 1e-5;
/// Fraction of the running statistic kept at each update.
pub const BN_MOMENTUM: f64 = 0.98;

/// Batch normalization with learnable scale/shift and running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, width: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::filled(1, width, 1.0))?,
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(1, width))?,
            running_mean: store.add_buffer(format!("{prefix}.running_mean"), Tensor::zeros(1, width))?,
            running_var: store.add_buffer(format!("{prefix}.running_var"), Tensor::filled(1, width, 1.0))?,
        })
    }

    /// Train mode normalizes with batch statistics and queues a running-stat
    /// update on the tape; eval mode uses the stored running statistics.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, mode: NormMode) -> Result<Var> {
        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        let (y, stats) = tape.batch_norm(
            x,
            gamma,
            beta,
            store.buffer(self.running_mean),
            store.buffer(self.running_var),
            BN_EPS,
            mode,
        )?;
        if let Some((batch_mean, batch_var)) = stats {
            tape.record_stat_update(StatUpdate {
                mean: self.running_mean,
                var: self.running_var,
                batch_mean,
                batch_var,
            });
        }
        Ok(y)
    }
}

/// Folds the batch statistics recorded on a tape into the running buffers.
pub fn apply_stat_updates(store: &mut ParamStore, updates: &[StatUpdate], momentum: f64) {
    for u in updates {
        for (buf, batch) in [(u.mean, &u.batch_mean), (u.var, &u.batch_var)] {
            for (r, b) in store.buffer_mut(buf).data_mut().iter_mut().zip(batch) {
                *r = momentum * *r + (1.0 - momentum) * b;
            }
        }
    }
}
