use nalgebra::Vector3;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub type Point3 = Vector3<f64>;

/// N points with an N×D feature matrix and optional integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
    features: Tensor,
    labels: Option<Vec<usize>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>, features: Tensor, labels: Option<Vec<usize>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("point cloud must contain at least one point"));
        }
        if let Some(i) = points.iter().position(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::invalid(format!("point {i} is not finite")));
        }
        if features.rows() != points.len() {
            return Err(Error::invalid(format!(
                "feature rows ({}) differ from point count ({})",
                features.rows(),
                points.len()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != points.len() {
                return Err(Error::invalid(format!(
                    "label count ({}) differs from point count ({})",
                    l.len(),
                    points.len()
                )));
            }
        }
        Ok(Self {
            points,
            features,
            labels,
        })
    }

    /// Cloud with a single constant-1 feature column and no labels.
    pub fn from_points(points: Vec<Point3>) -> Result<Self> {
        let n = points.len();
        Self::new(points, Tensor::filled(n, 1, 1.0), None)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub(crate) fn points_mut(&mut self) -> &mut [Point3] {
        &mut self.points
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn with_features(mut self, features: Tensor) -> Result<Self> {
        if features.rows() != self.points.len() {
            return Err(Error::invalid("feature rows differ from point count"));
        }
        self.features = features;
        Ok(self)
    }

    pub fn with_labels(mut self, labels: Option<Vec<usize>>) -> Result<Self> {
        if labels.as_ref().is_some_and(|l| l.len() != self.points.len()) {
            return Err(Error::invalid("label count differs from point count"));
        }
        self.labels = labels;
        Ok(self)
    }

    pub fn centroid(&self) -> Point3 {
        centroid(&self.points)
    }
}

pub fn centroid(points: &[Point3]) -> Point3 {
    let mut c = Point3::zeros();
    for p in points {
        c += p;
    }
    c / points.len() as f64
}
