use std::sync::Arc;

use super::{ArchitectureSpec, Variant};
use crate::autodiff::{Segments, Tensor};
use crate::conv::PairGeometry;
use crate::error::{Error, Result};
use crate::geometry::{grid_subsample_equivariant, nearest, radius_neighbors_capped, Point3, PointCloud};
use crate::lrf::{global_lrf_init, multi_scale_lrf_init, LrfSet};

/// Everything the network needs about one cloud that does not depend on
/// learned parameters: the subsampling pyramid, neighborhoods and initial
/// frames.
#[derive(Clone, Debug)]
pub struct PreparedCloud {
    pub levels: Vec<Vec<Point3>>,
    conv: Vec<PairGeometry>,
    pool: Vec<PairGeometry>,
    carry: Vec<Vec<usize>>,
    upsample: Vec<Vec<usize>>,
    pub frames: LrfSet,
    pub features: Tensor,
    pub point_labels: Option<Vec<usize>>,
    pub class: Option<usize>,
    /// False when some subsampling step fell back to an axis-aligned grid.
    pub equivariant: bool,
}

impl PreparedCloud {
    /// `cloud` is the preprocessed first level.
    pub fn new(cloud: &PointCloud, spec: &ArchitectureSpec) -> Result<Self> {
        if cloud.features().cols() != spec.in_features {
            return Err(Error::invalid(format!(
                "cloud has {} feature columns, the architecture expects {}",
                cloud.features().cols(),
                spec.in_features
            )));
        }
        let level_count = spec.level_count();
        let cap = (spec.neighbor_cap > 0).then_some(spec.neighbor_cap);
        let mut levels = vec![cloud.points().to_vec()];
        let mut carry = Vec::new();
        let mut equivariant = true;
        let mut current = cloud.clone();
        for l in 1..level_count {
            let sub = grid_subsample_equivariant(&current, spec.grid(l))?;
            equivariant &= sub.equivariant;
            levels.push(sub.cloud.points().to_vec());
            carry.push(sub.carry);
            current = sub.cloud;
        }
        let mut conv = Vec::with_capacity(level_count);
        let mut pool = Vec::new();
        let mut upsample = Vec::new();
        for l in 0..level_count {
            let r = spec.radius(l);
            let nb = radius_neighbors_capped(&levels[l], &levels[l], r, cap)?;
            conv.push(PairGeometry::new(&levels[l], &levels[l], &nb)?);
            if l + 1 < level_count {
                let nb = radius_neighbors_capped(&levels[l], &levels[l + 1], r, cap)?;
                pool.push(PairGeometry::new(&levels[l], &levels[l + 1], &nb)?);
                upsample.push(nearest(&levels[l + 1], &levels[l])?);
            }
        }
        let frames = match spec.variant {
            Variant::Full | Variant::NoMerge => multi_scale_lrf_init(cloud, &spec.lrf_scales)?,
            Variant::OneLocal => multi_scale_lrf_init(cloud, &spec.lrf_scales[..1])?,
            Variant::OneGlobal => global_lrf_init(cloud, 1),
            Variant::Standard => LrfSet::identity(cloud.len(), 1),
        };
        Ok(Self {
            levels,
            conv,
            pool,
            carry,
            upsample,
            frames,
            features: cloud.features().clone(),
            point_labels: cloud.labels().map(<[usize]>::to_vec),
            class: None,
            equivariant,
        })
    }

    pub fn with_class(mut self, class: usize) -> Self {
        self.class = Some(class);
        self
    }

    pub fn len(&self) -> usize {
        self.levels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels[0].is_empty()
    }

    /// Number of frames flagged degenerate at initialization.
    pub fn degenerate_frames(&self) -> usize {
        self.frames.degenerate_count()
    }
}

/// Per-level stacked geometry of a batch.
#[derive(Clone, Debug)]
pub(crate) struct BatchLevel {
    pub conv: PairGeometry,
    pub pool: Option<PairGeometry>,
    pub carry: Option<Arc<[usize]>>,
    pub upsample: Option<Arc<[usize]>>,
    pub clouds: Arc<Segments>,
}

/// Several prepared clouds stacked into one graph input.
#[derive(Clone, Debug)]
pub struct Batch {
    pub(crate) levels: Vec<BatchLevel>,
    pub(crate) frames: Tensor,
    pub(crate) features: Tensor,
    pub cloud_count: usize,
    /// One class per cloud, when every cloud has one.
    pub classes: Option<Arc<[usize]>>,
    /// Stacked first-level point labels, when every cloud has them.
    pub point_labels: Option<Arc<[usize]>>,
}

impl Batch {
    pub fn new(clouds: &[&PreparedCloud]) -> Result<Self> {
        let first = clouds.first().ok_or_else(|| Error::invalid("empty batch"))?;
        let level_count = first.levels.len();
        let j = first.frames.frame_count();
        if clouds
            .iter()
            .any(|c| c.levels.len() != level_count || c.frames.frame_count() != j)
        {
            return Err(Error::invalid("batch mixes clouds prepared for different architectures"));
        }
        let mut levels = Vec::with_capacity(level_count);
        for l in 0..level_count {
            let conv = PairGeometry::concat(&clouds.iter().map(|c| &c.conv[l]).collect::<Vec<_>>());
            let sizes: Vec<usize> = clouds.iter().map(|c| c.levels[l].len()).collect();
            let (pool, carry, upsample) = if l + 1 < level_count {
                let pool = PairGeometry::concat(&clouds.iter().map(|c| &c.pool[l]).collect::<Vec<_>>());
                let (mut carry, mut up) = (Vec::new(), Vec::new());
                let (mut off, mut off_next) = (0, 0);
                for c in clouds {
                    carry.extend(c.carry[l].iter().map(|i| i + off));
                    up.extend(c.upsample[l].iter().map(|i| i + off_next));
                    off += c.levels[l].len();
                    off_next += c.levels[l + 1].len();
                }
                (Some(pool), Some(carry.into()), Some(up.into()))
            } else {
                (None, None, None)
            };
            levels.push(BatchLevel {
                conv,
                pool,
                carry,
                upsample,
                clouds: Arc::new(Segments::from_lengths(sizes)),
            });
        }
        let frames = stack_rows(clouds.iter().map(|c| c.frames.to_tensor()))?;
        let features = stack_rows(clouds.iter().map(|c| c.features.clone()))?;
        let classes = clouds
            .iter()
            .map(|c| c.class)
            .collect::<Option<Vec<usize>>>()
            .map(Into::into);
        let point_labels = clouds
            .iter()
            .map(|c| c.point_labels.clone())
            .collect::<Option<Vec<Vec<usize>>>>()
            .map(|v| v.concat().into());
        Ok(Self {
            levels,
            frames,
            features,
            cloud_count: clouds.len(),
            classes,
            point_labels,
        })
    }

    /// Rows per cloud at the first level.
    pub fn first_level(&self) -> &Segments {
        &self.levels[0].clouds
    }
}

fn stack_rows(parts: impl Iterator<Item = Tensor>) -> Result<Tensor> {
    let parts: Vec<Tensor> = parts.collect();
    let cols = parts[0].cols();
    let rows = parts.iter().map(Tensor::rows).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for p in &parts {
        if p.cols() != cols {
            return Err(Error::invalid("stacked tensors differ in width"));
        }
        data.extend_from_slice(p.data());
    }
    Tensor::from_vec(rows, cols, data)
}
