//! Point-cloud files, preprocessing, rotation augmentation and the synthetic
//! shape dataset.

mod io;
mod synth;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use io::{load_cloud, load_manifest, parse_xyz, save_manifest, save_ply, save_xyz};
pub use synth::{synth_shapes, ShapeClass, SynthSpec, PARTS_PER_CLASS, SHAPE_CLASSES};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{grid_subsample_equivariant, sample_uniform_rotation, sample_z_rotation, PointCloud, Rotation3};

/// Default first-level cell on unit-sphere clouds.
pub const DEFAULT_GRID: f64 = 0.02;

/// Rotation scenario: none (N), about the vertical axis (z) or arbitrary
/// (so3, the A scenario).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RotationMode {
    #[default]
    None,
    Z,
    So3,
}

impl RotationMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "n" => Ok(Self::None),
            "z" => Ok(Self::Z),
            "so3" | "a" => Ok(Self::So3),
            _ => Err(Error::Config(format!("unknown rotation mode `{s}` (none, z, so3)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Z => "z",
            Self::So3 => "so3",
        }
    }

    pub fn sample<R: Rng + ?Sized>(self, rng: &mut R) -> Rotation3 {
        match self {
            Self::None => Rotation3::identity(),
            Self::Z => sample_z_rotation(rng),
            Self::So3 => sample_uniform_rotation(rng),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationSpec {
    pub rotation: RotationMode,
    /// Standard deviation of per-coordinate Gaussian jitter.
    pub jitter: f64,
    /// Isotropic scale drawn uniformly from `[lo, hi]`.
    pub scale: (f64, f64),
}

impl AugmentationSpec {
    pub fn identity() -> Self {
        Self::rotation_only(RotationMode::None)
    }

    pub fn rotation_only(rotation: RotationMode) -> Self {
        Self {
            rotation,
            jitter: 0.0,
            scale: (1.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.jitter >= 0.0) || !(self.scale.0 > 0.0) || !(self.scale.0 <= self.scale.1) {
            return Err(Error::Config(format!("invalid augmentation {self:?}")));
        }
        Ok(())
    }
}

/// Rotation, then jitter, then isotropic scaling (about the origin).
pub fn augment<R: Rng + ?Sized>(cloud: &PointCloud, spec: &AugmentationSpec, rng: &mut R) -> Result<PointCloud> {
    spec.validate()?;
    let rot = spec.rotation.sample(rng);
    let scale = if spec.scale.0 < spec.scale.1 {
        rng.gen_range(spec.scale.0..=spec.scale.1)
    } else {
        spec.scale.0
    };
    let noise = (spec.jitter > 0.0)
        .then(|| Normal::new(0.0, spec.jitter))
        .transpose()
        .map_err(|e| Error::invalid(e.to_string()))?;
    let points = cloud
        .points()
        .iter()
        .map(|p| {
            let mut q = rot.apply(p);
            if let Some(n) = &noise {
                q += crate::geometry::Point3::from_fn(|_, _| n.sample(rng));
            }
            q * scale
        })
        .collect();
    PointCloud::new(points, cloud.features().clone(), cloud.labels().map(<[usize]>::to_vec))
}

/// How the clouds of a dataset were normalized.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    pub grid: f64,
    /// Center on the centroid and scale to unit maximum norm.
    pub rescale: bool,
    /// Append the z coordinate as a second feature. Only invariant to
    /// rotations about the vertical axis.
    pub height_feature: bool,
}

impl Preprocessing {
    pub fn new(grid: f64) -> Self {
        Self {
            grid,
            rescale: true,
            height_feature: false,
        }
    }

    pub fn feature_count(&self) -> usize {
        1 + usize::from(self.height_feature)
    }

    pub fn apply(&self, cloud: &PointCloud) -> Result<PointCloud> {
        if !(self.grid > 0.0) {
            return Err(Error::invalid(format!("grid must be positive, got {}", self.grid)));
        }
        let mut points = cloud.points().to_vec();
        if self.rescale {
            let c = cloud.centroid();
            let max = points.iter().map(|p| (p - c).norm()).fold(0.0, f64::max);
            let s = if max > 0.0 { 1.0 / max } else { 1.0 };
            for p in &mut points {
                *p = (*p - c) * s;
            }
        }
        let n = points.len();
        let scaled = PointCloud::new(points, Tensor::filled(n, 1, 1.0), cloud.labels().map(<[usize]>::to_vec))?;
        let sub = grid_subsample_equivariant(&scaled, self.grid)?.cloud;
        let n = sub.len();
        let features = if self.height_feature {
            let mut t = Tensor::filled(n, 2, 1.0);
            for (i, p) in sub.points().iter().enumerate() {
                t.set(i, 1, p.z);
            }
            t
        } else {
            Tensor::filled(n, 1, 1.0)
        };
        sub.with_features(features)
    }
}

/// Centers on the centroid, scales to unit maximum norm, grid-subsamples
/// with the PCA-aligned grid and attaches a constant-1 feature.
pub fn preprocess(cloud: &PointCloud, grid: f64) -> Result<PointCloud> {
    Preprocessing::new(grid).apply(cloud)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Point labels, when present, are global part labels.
    pub cloud: PointCloud,
    pub class: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub split: Split,
    pub preprocessing: Option<Preprocessing>,
    pub class_count: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for s in &self.samples {
            counts[s.class] += 1;
        }
        counts
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// Applies `p` to every cloud. Already preprocessed datasets are
    /// rejected so all clouds share one preprocessing record.
    pub fn preprocessed(&self, p: Preprocessing) -> Result<Dataset> {
        if self.preprocessing.is_some() {
            return Err(Error::invalid("dataset is already preprocessed"));
        }
        let samples = self
            .samples
            .iter()
            .map(|s| {
                Ok(Sample {
                    cloud: p.apply(&s.cloud)?,
                    class: s.class,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Dataset {
            samples,
            split: self.split,
            preprocessing: Some(p),
            class_count: self.class_count,
        })
    }

    /// Applies `augment` to every cloud (the preprocessing record is kept).
    pub fn augmented<R: Rng + ?Sized>(&self, spec: &AugmentationSpec, rng: &mut R) -> Result<Dataset> {
        let samples = self
            .samples
            .iter()
            .map(|s| {
                Ok(Sample {
                    cloud: augment(&s.cloud, spec, rng)?,
                    class: s.class,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Dataset { samples, ..self.clone() })
    }

    /// Loads `path label` manifest entries; the class count is one more than
    /// the largest label.
    pub fn from_manifest(path: &std::path::Path, split: Split) -> Result<Dataset> {
        let entries = load_manifest(path)?;
        let samples: Vec<Sample> = entries
            .iter()
            .map(|(p, class)| {
                Ok(Sample {
                    cloud: load_cloud(p)?,
                    class: *class,
                })
            })
            .collect::<Result<_>>()?;
        let class_count = samples.iter().map(|s| s.class + 1).max().unwrap_or(0);
        Ok(Dataset {
            samples,
            split,
            preprocessing: None,
            class_count,
        })
    }
}

#[cfg(test)]
mod tests;
