//! Classification and segmentation architectures, the training objective and
//! checkpoints.

mod checkpoint;
mod prepare;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::Checkpoint;
pub use prepare::{Batch, PreparedCloud};

use crate::autodiff::{BatchNorm, NormMode, ParamStore, Tape, Tensor, Var};
use crate::conv::{generate_kernel_points, load_or_generate_kernel_points, AlignedConv, KernelDisposition};
use crate::error::{Error, Result};
use crate::layers::{
    ortho_errors, BlockInput, BlockOutput, ClassificationHead, Linear, LrfUpdate, ResidualBlock,
    ResidualBlockSpec, SimpleBlock, UnaryBlock,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classify,
    Segment,
}

/// Full model and the ablated versions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// J multi-scale local frames with neighbor-frame features.
    Full,
    /// As `Full` without the neighbor-frame features.
    NoMerge,
    /// One local frame (first scale) per point.
    OneLocal,
    /// One frame per point, initialized with the global PCA frame.
    OneGlobal,
    /// Plain kernel point convolution: identity frames, no frame features,
    /// no frame updates. Not rotation invariant.
    Standard,
}

impl Variant {
    pub const ABLATIONS: [Variant; 4] = [Variant::Full, Variant::NoMerge, Variant::OneLocal, Variant::OneGlobal];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoMerge => "no-merge",
            Variant::OneLocal => "one-local",
            Variant::OneGlobal => "one-global",
            Variant::Standard => "standard",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [Variant::Full, Variant::NoMerge, Variant::OneLocal, Variant::OneGlobal, Variant::Standard]
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }

    fn merge(self) -> bool {
        matches!(self, Variant::Full | Variant::OneLocal | Variant::OneGlobal)
    }

    fn updates_frames(self) -> bool {
        self != Variant::Standard
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Simple,
    Residual,
    Strided,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub out: usize,
}

/// Architecture hyperparameters; serialized as canonical TOML text.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSpec {
    pub task: Task,
    pub variant: Variant,
    pub classes: usize,
    pub in_features: usize,
    /// Cell size of the first level.
    pub grid_size: f64,
    /// Convolution radius in cells.
    pub radius_ratio: f64,
    /// Influence width relative to the convolution radius.
    pub sigma_ratio: f64,
    /// Radius of the kernel point ball relative to the convolution radius.
    pub kernel_extent: f64,
    pub kernel_points: usize,
    pub kernel_seed: u64,
    pub lrf_scales: Vec<usize>,
    pub omega: f64,
    /// Maximum neighbors per query, 0 for no limit.
    pub neighbor_cap: usize,
    pub head_hidden: usize,
    pub blocks: Vec<BlockSpec>,
}

fn ten_blocks(base: usize) -> Vec<BlockSpec> {
    use BlockKind::*;
    let b = |kind, m: usize| BlockSpec { kind, out: base * m };
    vec![
        b(Simple, 1),
        b(Residual, 2),
        b(Strided, 2),
        b(Residual, 4),
        b(Strided, 4),
        b(Residual, 8),
        b(Strided, 8),
        b(Residual, 16),
        b(Strided, 16),
        b(Residual, 16),
    ]
}

impl ArchitectureSpec {
    /// Full-width classifier: ten blocks (four strided), 64 → 1024 channels.
    pub fn default_classifier(classes: usize) -> Self {
        Self {
            task: Task::Classify,
            variant: Variant::Full,
            classes,
            in_features: 1,
            grid_size: 0.02,
            radius_ratio: 2.5,
            sigma_ratio: crate::conv::DEFAULT_SIGMA_RATIO,
            kernel_extent: 0.66,
            kernel_points: crate::conv::DEFAULT_KERNEL_COUNT,
            kernel_seed: 0,
            lrf_scales: crate::lrf::DEFAULT_LRF_SCALES.to_vec(),
            omega: crate::layers::DEFAULT_OMEGA,
            neighbor_cap: 40,
            head_hidden: 512,
            blocks: ten_blocks(64),
        }
    }

    /// Same skeleton at desk scale: 16 → 256 channels on a coarser grid.
    pub fn toy_classifier(classes: usize) -> Self {
        Self {
            grid_size: 0.15,
            head_hidden: 128,
            blocks: ten_blocks(16),
            ..Self::default_classifier(classes)
        }
    }

    pub fn toy_segmenter(parts: usize) -> Self {
        Self {
            task: Task::Segment,
            ..Self::toy_classifier(parts)
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    /// Alignment count J used by the variant.
    pub fn frame_count(&self) -> usize {
        match self.variant {
            Variant::Full | Variant::NoMerge => self.lrf_scales.len(),
            _ => 1,
        }
    }

    pub fn level_count(&self) -> usize {
        1 + self.blocks.iter().filter(|b| b.kind == BlockKind::Strided).count()
    }

    /// Cell size of level `l`.
    pub fn grid(&self, level: usize) -> f64 {
        self.grid_size * (1u64 << level) as f64
    }

    /// Convolution radius at level `l`.
    pub fn radius(&self, level: usize) -> f64 {
        self.radius_ratio * self.grid(level)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.blocks.is_empty() {
            return bad("architecture has no blocks".into());
        }
        if self.classes == 0 || self.in_features == 0 || self.head_hidden == 0 {
            return bad("classes, in_features and head_hidden must be positive".into());
        }
        for (name, v) in [
            ("grid_size", self.grid_size),
            ("radius_ratio", self.radius_ratio),
            ("sigma_ratio", self.sigma_ratio),
            ("kernel_extent", self.kernel_extent),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if self.kernel_extent > 1.0 {
            return bad(format!("kernel_extent {} puts kernel points outside the radius", self.kernel_extent));
        }
        if !(self.omega >= 0.0) {
            return bad(format!("omega must be nonnegative, got {}", self.omega));
        }
        if self.kernel_points == 0 {
            return bad("kernel_points must be positive".into());
        }
        if self.lrf_scales.is_empty() || self.lrf_scales.iter().any(|&k| k < 3) {
            return bad(format!("lrf_scales must be nonempty and >= 3, got {:?}", self.lrf_scales));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            match b.kind {
                BlockKind::Simple if b.out == 0 => return bad(format!("block {i}: zero width")),
                BlockKind::Residual | BlockKind::Strided if b.out < 4 => {
                    return bad(format!("block {i}: width {} leaves an empty bottleneck", b.out))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Canonical text form (stable key order).
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("architecture serializes")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    fn disposition(&self, level: usize, cache: Option<&std::path::Path>) -> Result<KernelDisposition> {
        let r = self.radius(level);
        let extent = self.kernel_extent * r;
        let d = match cache {
            Some(dir) => load_or_generate_kernel_points(dir, self.kernel_points, extent, self.kernel_seed)?,
            None => generate_kernel_points(self.kernel_points, extent, self.kernel_seed)?,
        };
        d.with_sigma(self.sigma_ratio * r)
    }
}

#[derive(Clone, Debug)]
enum Block {
    Simple(SimpleBlock),
    Residual(ResidualBlock),
}

impl Block {
    fn forward(&self, tape: &mut Tape, store: &ParamStore, input: BlockInput<'_>) -> Result<BlockOutput> {
        match self {
            Block::Simple(b) => b.forward(tape, store, input),
            Block::Residual(b) => b.forward(tape, store, input),
        }
    }

    fn strided(&self) -> bool {
        matches!(self, Block::Residual(b) if b.spec.strided)
    }
}

#[derive(Clone, Debug)]
struct Decoder {
    /// Indexed by the level being decoded into.
    unary: Vec<UnaryBlock>,
    head: UnaryBlock,
    out: Linear,
}

#[derive(Clone, Debug)]
enum Head {
    Classify(ClassificationHead),
    Segment(Decoder),
}

/// A built network together with its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ArchitectureSpec,
    pub store: ParamStore,
    blocks: Vec<Block>,
    head: Head,
}

/// Result of a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// One row per cloud (classification) or per first-level point.
    pub logits: Var,
    /// Orthonormalization loss: per block the mean over points, summed over
    /// blocks.
    pub ortho: Var,
    /// Raw frame updates of every block, row-packed.
    pub updates: Vec<Var>,
}

impl Model {
    pub fn build(spec: ArchitectureSpec, seed: u64) -> Result<Self> {
        Self::build_with_cache(spec, seed, None)
    }

    /// Like [`Model::build`], reading and writing kernel dispositions in
    /// `cache`.
    pub fn build_with_cache(spec: ArchitectureSpec, seed: u64, cache: Option<&std::path::Path>) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let j = spec.frame_count();
        let merge = spec.variant.merge();
        let update = spec.variant.updates_frames();
        let dispositions: Vec<KernelDisposition> = (0..spec.level_count())
            .map(|l| spec.disposition(l, cache))
            .collect::<Result<_>>()?;
        let mut blocks = Vec::with_capacity(spec.blocks.len());
        let mut width = spec.in_features;
        let mut level = 0;
        let mut skip_widths = Vec::new();
        for (i, b) in spec.blocks.iter().enumerate() {
            let name = format!("block{i}");
            let block = match b.kind {
                BlockKind::Simple => {
                    let conv = AlignedConv::new(
                        &mut store,
                        &format!("{name}.conv"),
                        dispositions[level].clone(),
                        j,
                        width,
                        b.out,
                        merge,
                        &mut rng,
                    )?;
                    let norm = BatchNorm::new(&mut store, &format!("{name}.conv_bn"), b.out)?;
                    let lrf_update = if update {
                        Some(LrfUpdate::new(&mut store, &format!("{name}.lrf_update"), b.out, j, spec.omega, &mut rng)?)
                    } else {
                        None
                    };
                    Block::Simple(SimpleBlock { conv, norm, lrf_update })
                }
                BlockKind::Residual | BlockKind::Strided => {
                    let strided = b.kind == BlockKind::Strided;
                    let rs = ResidualBlockSpec {
                        in_dim: width,
                        out_dim: b.out,
                        strided,
                        frame_count: j,
                        merge,
                        update_lrf: update,
                        omega: spec.omega,
                    };
                    Block::Residual(ResidualBlock::new(&mut store, &name, rs, dispositions[level].clone(), &mut rng)?)
                }
            };
            if b.kind == BlockKind::Strided {
                skip_widths.push(width);
                level += 1;
            }
            width = b.out;
            blocks.push(block);
        }
        let head = match spec.task {
            Task::Classify => Head::Classify(ClassificationHead::new(
                &mut store,
                "head",
                width,
                spec.head_hidden,
                spec.classes,
                &mut rng,
            )?),
            Task::Segment => {
                let mut unary: Vec<Option<UnaryBlock>> = vec![None; skip_widths.len()];
                let mut w = width;
                for l in (0..skip_widths.len()).rev() {
                    let out = skip_widths[l];
                    unary[l] = Some(UnaryBlock::new(&mut store, &format!("decoder{l}"), w + out, out, true, &mut rng)?);
                    w = out;
                }
                Head::Segment(Decoder {
                    unary: unary.into_iter().map(|u| u.expect("every level decoded")).collect(),
                    head: UnaryBlock::new(&mut store, "head.unary", w, spec.head_hidden, true, &mut rng)?,
                    out: Linear::new(&mut store, "head.out", spec.head_hidden, spec.classes, true, &mut rng)?,
                })
            }
        };
        Ok(Self {
            spec,
            store,
            blocks,
            head,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.store.scalar_count()
    }

    pub fn prepare(&self, cloud: &crate::geometry::PointCloud) -> Result<PreparedCloud> {
        PreparedCloud::new(cloud, &self.spec)
    }

    pub fn forward(&self, tape: &mut Tape, batch: &Batch, mode: NormMode) -> Result<ForwardOutput> {
        forward_with(self, &self.store, tape, batch, mode)
    }

    /// Forward pass with parameters taken from `store` instead of the
    /// model's own.
    pub fn forward_with_store(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        batch: &Batch,
        mode: NormMode,
    ) -> Result<ForwardOutput> {
        forward_with(self, store, tape, batch, mode)
    }

    /// Eval-mode logits and mean orthonormality error `‖I − U Uᵀ‖_F`.
    pub fn predict(&self, batch: &Batch) -> Result<Prediction> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, batch, NormMode::Eval)?;
        tape.check_finite(out.logits, "logits")?;
        Ok(Prediction {
            logits: tape.value(out.logits).clone(),
            ortho_loss: tape.value(out.ortho).item(),
            ortho_error: mean_ortho_error(&tape, &out.updates),
        })
    }
}

/// Eval-mode outputs detached from the tape.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub logits: Tensor,
    pub ortho_loss: f64,
    pub ortho_error: OrthoError,
}

/// Sum and count of per-frame `‖I − U Uᵀ‖_F`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct OrthoError {
    pub sum: f64,
    pub count: usize,
}

impl OrthoError {
    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum / self.count as f64
        }
    }

    pub fn merge(&mut self, other: OrthoError) {
        self.sum += other.sum;
        self.count += other.count;
    }
}

pub fn mean_ortho_error(tape: &Tape, updates: &[Var]) -> OrthoError {
    let mut acc = OrthoError::default();
    for &u in updates {
        let e = ortho_errors(tape.value(u));
        acc.sum += e.iter().sum::<f64>();
        acc.count += e.len();
    }
    acc
}

fn forward_with(model: &Model, store: &ParamStore, tape: &mut Tape, batch: &Batch, mode: NormMode) -> Result<ForwardOutput> {
    if batch.features.cols() != model.spec.in_features || batch.levels.len() != model.spec.level_count() {
        return Err(Error::invalid("batch was prepared for a different architecture"));
    }
    if batch.frames.cols() != 9 * model.spec.frame_count() {
        return Err(Error::invalid("batch frame count differs from the architecture"));
    }
    let mut x = tape.constant(batch.features.clone());
    let mut frames = tape.constant(batch.frames.clone());
    let mut level = 0;
    let mut skips = Vec::new();
    let mut ortho: Option<Var> = None;
    let mut updates = Vec::new();
    for block in &model.blocks {
        let lv = &batch.levels[level];
        let strided = block.strided();
        let (geometry, query_frames) = if strided {
            let carry = lv.carry.clone().expect("strided level has a next level");
            skips.push(x);
            (lv.pool.as_ref().expect("strided level has pooling"), tape.gather_rows(frames, carry)?)
        } else {
            (&lv.conv, frames)
        };
        let out = block.forward(
            tape,
            store,
            BlockInput {
                features: x,
                support_frames: frames,
                query_frames,
                geometry,
                mode,
            },
        )?;
        x = out.features;
        frames = out.frames;
        if let Some(u) = out.update {
            updates.push(u.updates);
            ortho = Some(match ortho {
                Some(o) => tape.add(o, u.ortho)?,
                None => u.ortho,
            });
        }
        if strided {
            level += 1;
        }
    }
    let ortho = match ortho {
        Some(o) => o,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    let logits = match &model.head {
        Head::Classify(h) => {
            let pooled = tape.segment_mean(x, batch.levels[level].clouds.clone())?;
            h.forward(tape, store, pooled)?
        }
        Head::Segment(dec) => {
            let mut y = x;
            for l in (0..level).rev() {
                let idx = batch.levels[l].upsample.clone().expect("lower level upsamples");
                let up = tape.gather_rows(y, idx)?;
                let cat = tape.concat_cols(&[up, skips[l]])?;
                y = dec.unary[l].forward(tape, store, cat, mode)?;
            }
            let h = dec.head.forward(tape, store, y, mode)?;
            dec.out.forward(tape, store, h)?
        }
    };
    Ok(ForwardOutput { logits, ortho, updates })
}

/// Softmax cross-entropy (mean over rows) plus the orthonormalization loss.
pub fn total_loss(tape: &mut Tape, logits: Var, labels: Arc<[usize]>, ortho: Var) -> Result<Var> {
    let ce = tape.softmax_cross_entropy(logits, labels)?;
    tape.add(ce, ortho)
}

#[cfg(test)]
mod tests;
