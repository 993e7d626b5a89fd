//! Network building blocks: LRF updates, convolution blocks, pooling,
//! upsampling and heads.

mod linear;

use std::sync::Arc;

use rand::Rng;

pub use linear::{normal_tensor, Linear};

use crate::autodiff::{BatchNorm, NormMode, ParamStore, Segments, Tape, Tensor, Var};
use crate::conv::{AlignedConv, KernelDisposition, PairGeometry};
use crate::error::{Error, Result};
use crate::geometry::{nearest, NeighborIndex, Point3};

/// Default weight of the orthonormalization loss.
pub const DEFAULT_OMEGA: f64 = 0.5;

/// Predicts per-point frame updates `U_j` from invariant features and
/// composes them with the previous frames: `R'_j = R_j U_j`.
#[derive(Clone, Debug)]
pub struct LrfUpdate {
    pub hidden: Linear,
    pub out: Linear,
    pub frame_count: usize,
    pub omega: f64,
}

/// Frames after an update, with the raw updates and the weighted
/// orthonormalization loss `ω mean_points Σ_j ‖I − U_j U_jᵀ‖²_F`.
#[derive(Clone, Copy, Debug)]
pub struct UpdatedFrames {
    pub frames: Var,
    pub updates: Var,
    pub ortho: Var,
}

impl LrfUpdate {
    /// The last layer starts with zero weights and an identity bias, so the
    /// initial updates are exactly `I`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        frame_count: usize,
        omega: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let hidden = Linear::new(store, &format!("{name}.hidden"), in_dim, in_dim, true, rng)?;
        let mut bias = Tensor::zeros(1, 9 * frame_count);
        for j in 0..frame_count {
            for d in 0..3 {
                bias.set(0, 9 * j + 4 * d, 1.0);
            }
        }
        let out = Linear::with_values(
            store,
            &format!("{name}.out"),
            Tensor::zeros(in_dim, 9 * frame_count),
            Some(bias),
        )?;
        Ok(Self {
            hidden,
            out,
            frame_count,
            omega,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, features: Var, frames: Var) -> Result<UpdatedFrames> {
        let h = self.hidden.forward(tape, store, features)?;
        let h = tape.relu(h);
        // fan-in scaling keeps the step taken by `U` independent of the width
        let width = tape.shape(h).1.max(1);
        let h = tape.scale(h, 1.0 / (width as f64).sqrt());
        let updates = self.out.forward(tape, store, h)?;
        let new_frames = tape.compose_frames(frames, updates)?;
        let raw = tape.ortho_loss(updates)?;
        let rows = tape.shape(updates).0.max(1);
        let ortho = tape.scale(raw, self.omega / rows as f64);
        Ok(UpdatedFrames {
            frames: new_frames,
            updates,
            ortho,
        })
    }
}

/// `‖I − U Uᵀ‖_F` for each 3×3 block of a row-packed update tensor.
pub fn ortho_errors(updates: &Tensor) -> Vec<f64> {
    let mut out = Vec::with_capacity(updates.len() / 9);
    for r in 0..updates.rows() {
        for u in updates.row(r).chunks_exact(9) {
            let mut s = 0.0;
            for a in 0..3 {
                for b in 0..3 {
                    let dot: f64 = (0..3).map(|c| u[3 * a + c] * u[3 * b + c]).sum();
                    let e = if a == b { 1.0 - dot } else { -dot };
                    s += e * e;
                }
            }
            out.push(s.sqrt());
        }
    }
    out
}

/// Linear layer followed by batch normalization and an optional ReLU.
#[derive(Clone, Debug)]
pub struct UnaryBlock {
    pub linear: Linear,
    pub norm: BatchNorm,
    pub relu: bool,
}

impl UnaryBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        relu: bool,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            linear: Linear::new(store, &format!("{name}.linear"), in_dim, out_dim, false, rng)?,
            norm: BatchNorm::new(store, &format!("{name}.bn"), out_dim)?,
            relu,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, mode: NormMode) -> Result<Var> {
        let y = self.linear.forward(tape, store, x)?;
        let y = self.norm.forward(tape, store, y, mode)?;
        Ok(if self.relu { tape.relu(y) } else { y })
    }
}

/// Output of a convolution block.
#[derive(Clone, Copy, Debug)]
pub struct BlockOutput {
    pub features: Var,
    /// Frames at the block's query points, updated when the block has an
    /// LRF update.
    pub frames: Var,
    pub update: Option<UpdatedFrames>,
}

/// Block inputs shared by both block kinds.
#[derive(Clone, Copy, Debug)]
pub struct BlockInput<'a> {
    pub features: Var,
    pub support_frames: Var,
    pub query_frames: Var,
    pub geometry: &'a PairGeometry,
    pub mode: NormMode,
}

/// Convolution, batch normalization, ReLU and an LRF update.
#[derive(Clone, Debug)]
pub struct SimpleBlock {
    pub conv: AlignedConv,
    pub norm: BatchNorm,
    pub lrf_update: Option<LrfUpdate>,
}

impl SimpleBlock {
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, input: BlockInput<'_>) -> Result<BlockOutput> {
        let y = self.conv.forward(
            tape,
            store,
            input.features,
            input.support_frames,
            input.query_frames,
            input.geometry,
        )?;
        let y = self.norm.forward(tape, store, y, input.mode)?;
        let features = tape.relu(y);
        finish_block(tape, store, features, input.query_frames, self.lrf_update.as_ref())
    }
}

fn finish_block(
    tape: &mut Tape,
    store: &ParamStore,
    features: Var,
    query_frames: Var,
    update: Option<&LrfUpdate>,
) -> Result<BlockOutput> {
    match update {
        Some(u) => {
            let up = u.forward(tape, store, features, query_frames)?;
            Ok(BlockOutput {
                features,
                frames: up.frames,
                update: Some(up),
            })
        }
        None => Ok(BlockOutput {
            features,
            frames: query_frames,
            update: None,
        }),
    }
}

/// Layout of a residual block.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlockSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub strided: bool,
    pub frame_count: usize,
    pub merge: bool,
    pub update_lrf: bool,
    pub omega: f64,
}

impl ResidualBlockSpec {
    pub fn bottleneck(&self) -> usize {
        self.out_dim / 4
    }
}

/// Bottleneck residual block: 1×1 reduction, aligned convolution, 1×1
/// expansion, summed with a (max-pooled when strided) shortcut.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub spec: ResidualBlockSpec,
    pub reduce: UnaryBlock,
    pub conv: AlignedConv,
    pub conv_norm: BatchNorm,
    pub expand: UnaryBlock,
    pub shortcut: Option<UnaryBlock>,
    pub lrf_update: Option<LrfUpdate>,
}

impl ResidualBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        spec: ResidualBlockSpec,
        disposition: KernelDisposition,
        rng: &mut R,
    ) -> Result<Self> {
        let b = spec.bottleneck();
        if b == 0 || spec.in_dim == 0 {
            return Err(Error::Config(format!(
                "{name}: widths {} -> {} leave an empty bottleneck",
                spec.in_dim, spec.out_dim
            )));
        }
        let reduce = UnaryBlock::new(store, &format!("{name}.reduce"), spec.in_dim, b, true, rng)?;
        let conv = AlignedConv::new(
            store,
            &format!("{name}.conv"),
            disposition,
            spec.frame_count,
            b,
            b,
            spec.merge,
            rng,
        )?;
        let conv_norm = BatchNorm::new(store, &format!("{name}.conv_bn"), b)?;
        let expand = UnaryBlock::new(store, &format!("{name}.expand"), b, spec.out_dim, false, rng)?;
        let shortcut = if spec.in_dim != spec.out_dim {
            Some(UnaryBlock::new(
                store,
                &format!("{name}.shortcut"),
                spec.in_dim,
                spec.out_dim,
                false,
                rng,
            )?)
        } else {
            None
        };
        let lrf_update = if spec.update_lrf {
            Some(LrfUpdate::new(
                store,
                &format!("{name}.lrf_update"),
                spec.out_dim,
                spec.frame_count,
                spec.omega,
                rng,
            )?)
        } else {
            None
        };
        Ok(Self {
            spec,
            reduce,
            conv,
            conv_norm,
            expand,
            shortcut,
            lrf_update,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, input: BlockInput<'_>) -> Result<BlockOutput> {
        let geom = input.geometry;
        let h = self.reduce.forward(tape, store, input.features, input.mode)?;
        let h = self
            .conv
            .forward(tape, store, h, input.support_frames, input.query_frames, geom)?;
        let h = self.conv_norm.forward(tape, store, h, input.mode)?;
        let h = tape.relu(h);
        let h = self.expand.forward(tape, store, h, input.mode)?;
        let mut s = if self.spec.strided {
            max_pool_pairs(tape, input.features, geom)?
        } else {
            input.features
        };
        if let Some(sc) = &self.shortcut {
            s = sc.forward(tape, store, s, input.mode)?;
        }
        let sum = tape.add(h, s)?;
        let features = tape.relu(sum);
        finish_block(tape, store, features, input.query_frames, self.lrf_update.as_ref())
    }
}

/// Elementwise maximum over each neighborhood of `geom`; empty
/// neighborhoods give zero rows.
pub fn max_pool_pairs(tape: &mut Tape, features: Var, geom: &PairGeometry) -> Result<Var> {
    let g = tape.gather_rows(features, geom.support_idx.clone())?;
    tape.segment_max(g, geom.segments.clone())
}

/// Elementwise maximum of the features over each radius neighborhood.
pub fn max_pool_radius(tape: &mut Tape, features: Var, nb: &NeighborIndex) -> Result<Var> {
    let idx: Vec<usize> = nb.iter().flatten().copied().collect();
    let seg = Segments::from_lengths(nb.iter().map(<[usize]>::len));
    let g = tape.gather_rows(features, idx.into())?;
    tape.segment_max(g, Arc::new(seg))
}

/// Each fine point copies the features of its nearest coarse point.
pub fn nearest_upsample(
    tape: &mut Tape,
    coarse_features: Var,
    fine_points: &[Point3],
    coarse_points: &[Point3],
) -> Result<Var> {
    let idx = nearest(coarse_points, fine_points)?;
    tape.gather_rows(coarse_features, idx.into())
}

/// Mean over the rows of each segment (one segment per cloud).
pub fn global_average_pool(tape: &mut Tape, features: Var, clouds: Arc<Segments>) -> Result<Var> {
    tape.segment_mean(features, clouds)
}

/// Two fully connected layers with a ReLU between them.
#[derive(Clone, Debug)]
pub struct ClassificationHead {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl ClassificationHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), in_dim, hidden, true, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, classes, true, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, pooled: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, store, pooled)?;
        let h = tape.relu(h);
        self.fc2.forward(tape, store, h)
    }
}

#[cfg(test)]
mod tests;
