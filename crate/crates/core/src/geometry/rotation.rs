use nalgebra::{Matrix3, Unit, Vector3, Vector4};
use rand::Rng;
use rand_distr::StandardNormal;

use super::cloud::PointCloud;
use crate::error::{Error, Result};

/// Tolerance on `RᵀR = I` and `det R = 1` accepted by [`Rotation3::new`].
pub const ROTATION_TOL: f64 = 1e-12;

/// A proper rotation matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation3(Matrix3<f64>);

impl Rotation3 {
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        let ortho = (m.transpose() * m - Matrix3::identity()).abs().max();
        let det = m.determinant();
        if !(ortho <= ROTATION_TOL) || !((det - 1.0).abs() <= ROTATION_TOL) {
            return Err(Error::invalid(format!(
                "not a rotation: |RᵀR − I|max = {ortho:e}, det = {det}"
            )));
        }
        Ok(Self(m))
    }

    /// Wraps a matrix without checking it. Used for frames built to be
    /// orthonormal by construction.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Self(m)
    }

    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    pub fn about_axis(axis: Vector3<f64>, angle: f64) -> Self {
        let r = nalgebra::Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle);
        Self(*r.matrix())
    }

    pub fn about_z(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self(Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0))
    }

    /// Rotation of the unit quaternion `q = (w, x, y, z)` after normalization.
    pub fn from_quaternion(q: Vector4<f64>) -> Self {
        let q = q.normalize();
        let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
        Self(Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ))
    }

    #[inline]
    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    /// `self · other`.
    pub fn compose(&self, other: &Rotation3) -> Self {
        Self(self.0 * other.0)
    }

    #[inline]
    pub fn apply(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }
}

/// Haar-uniform rotation: four independent standard normals form a uniformly
/// distributed unit quaternion.
pub fn sample_uniform_rotation<R: Rng + ?Sized>(rng: &mut R) -> Rotation3 {
    loop {
        let q = Vector4::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        if q.norm() > 1e-12 {
            return Rotation3::from_quaternion(q);
        }
    }
}

/// Rotation about `e_z` by a uniform angle in `[0, 2π)`.
pub fn sample_z_rotation<R: Rng + ?Sized>(rng: &mut R) -> Rotation3 {
    Rotation3::about_z(rng.gen_range(0.0..std::f64::consts::TAU))
}

/// Rotates the points of a cloud; features and labels are unchanged.
pub fn apply_rotation(rot: &Rotation3, cloud: &PointCloud) -> PointCloud {
    let mut out = cloud.clone();
    for p in out.points_mut() {
        *p = rot.apply(p);
    }
    out
}
