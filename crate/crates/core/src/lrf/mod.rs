//! Rotation-equivariant local reference frames: PCA frames with a sign
//! convention, multi-scale initialization and nearest-neighbor pooling.

mod eigen;

use nalgebra::{Matrix3, Vector3};

pub use eigen::{covariance, symmetric_eigen3, SymmetricEigen3};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{knn, PointCloud, Point3, Rotation3};

/// Default k-NN scales for frame initialization; one frame per scale.
pub const DEFAULT_LRF_SCALES: [usize; 4] = [20, 40, 80, 160];

/// `λ₃/λ₁` below this marks a rank-deficient neighborhood.
pub const RANK_RATIO_TOL: f64 = 1e-12;
/// Relative eigenvalue gap below which eigenvectors are not identifiable.
pub const EIGEN_GAP_TOL: f64 = 1e-9;
/// Projection sums below this fraction of `Σ|projection|` count as ties.
pub const ORIENT_TIE_TOL: f64 = 1e-9;

/// A frame and whether its construction was ambiguous.
#[derive(Clone, Copy, Debug)]
pub struct Frame {
    pub rotation: Rotation3,
    pub degenerate: bool,
}

/// Per-point stacks of `J` frames, stored point-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LrfSet {
    frame_count: usize,
    frames: Vec<Matrix3<f64>>,
    degenerate: Vec<bool>,
}

impl LrfSet {
    pub fn new(frame_count: usize, frames: Vec<Matrix3<f64>>, degenerate: Vec<bool>) -> Result<Self> {
        if frame_count == 0 || frames.len() % frame_count != 0 || degenerate.len() != frames.len() {
            return Err(Error::invalid(format!(
                "LrfSet: {} frames / {} flags do not split into stacks of {frame_count}",
                frames.len(),
                degenerate.len()
            )));
        }
        Ok(Self {
            frame_count,
            frames,
            degenerate,
        })
    }

    /// `n` points each carrying `frame_count` identity frames.
    pub fn identity(n: usize, frame_count: usize) -> Self {
        Self {
            frame_count,
            frames: vec![Matrix3::identity(); n * frame_count],
            degenerate: vec![false; n * frame_count],
        }
    }

    /// Alignment count J.
    pub fn frame_count(&self) -> usize {
        self.frame_count
    }

    pub fn point_count(&self) -> usize {
        self.frames.len() / self.frame_count
    }

    pub fn get(&self, point: usize, j: usize) -> &Matrix3<f64> {
        &self.frames[point * self.frame_count + j]
    }

    pub fn is_degenerate(&self, point: usize, j: usize) -> bool {
        self.degenerate[point * self.frame_count + j]
    }

    pub fn degenerate_count(&self) -> usize {
        self.degenerate.iter().filter(|d| **d).count()
    }

    pub fn frames(&self) -> &[Matrix3<f64>] {
        &self.frames
    }

    /// `R · F` for every frame.
    pub fn rotated(&self, rot: &Rotation3) -> Self {
        Self {
            frame_count: self.frame_count,
            frames: self.frames.iter().map(|f| rot.matrix() * f).collect(),
            degenerate: self.degenerate.clone(),
        }
    }

    /// Packs into an N × 9J tensor; block `j` holds frame `j` row-major.
    pub fn to_tensor(&self) -> Tensor {
        let n = self.point_count();
        let mut t = Tensor::zeros(n, 9 * self.frame_count);
        for p in 0..n {
            let row = t.row_mut(p);
            for j in 0..self.frame_count {
                let f = self.get(p, j);
                for r in 0..3 {
                    for c in 0..3 {
                        row[9 * j + 3 * r + c] = f[(r, c)];
                    }
                }
            }
        }
        t
    }

    /// Inverse of [`LrfSet::to_tensor`]; degeneracy flags are cleared.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.cols() == 0 || t.cols() % 9 != 0 {
            return Err(Error::invalid(format!("frame tensor width {} is not 9J", t.cols())));
        }
        let j_count = t.cols() / 9;
        let mut frames = Vec::with_capacity(t.rows() * j_count);
        for p in 0..t.rows() {
            let row = t.row(p);
            for j in 0..j_count {
                frames.push(Matrix3::from_row_slice(&row[9 * j..9 * j + 9]));
            }
        }
        let n = frames.len();
        Self::new(j_count, frames, vec![false; n])
    }

    /// Stack of a single point as a list.
    pub fn stack(&self, point: usize) -> &[Matrix3<f64>] {
        &self.frames[point * self.frame_count..(point + 1) * self.frame_count]
    }
}

/// Fixes the sign ambiguity of PCA eigenvectors.
///
/// Column 1 and 2 are flipped so that `Σ_i e·(x_i − center) ≥ 0`; column 3 is
/// `e₁ × e₂`. When a sum is a tie (relative to `Σ|e·(x_i − center)|`) the
/// sign making the largest-|projection| point positive is used; if that is
/// also ambiguous the column is kept and the frame is flagged.
pub fn orient_frame(eigvecs: &Matrix3<f64>, points: &[Point3], center: &Point3) -> Frame {
    let mut cols = [eigvecs.column(0).into_owned(), eigvecs.column(1).into_owned()];
    let mut degenerate = false;
    for e in cols.iter_mut() {
        match orientation_sign(e, points, center) {
            Some(s) => *e *= s,
            None => degenerate = true,
        }
    }
    let e3 = cols[0].cross(&cols[1]);
    let m = Matrix3::from_columns(&[cols[0], cols[1], e3]);
    Frame {
        rotation: Rotation3::from_matrix_unchecked(m),
        degenerate,
    }
}

fn orientation_sign(e: &Vector3<f64>, points: &[Point3], center: &Point3) -> Option<f64> {
    let mut sum = 0.0;
    let mut abs_sum = 0.0;
    let mut max_abs = 0.0f64;
    for p in points {
        let proj = e.dot(&(p - center));
        sum += proj;
        abs_sum += proj.abs();
        max_abs = max_abs.max(proj.abs());
    }
    if abs_sum == 0.0 {
        return None;
    }
    if sum.abs() > ORIENT_TIE_TOL * abs_sum {
        return Some(sum.signum());
    }
    // every point within rounding of the largest |projection| must agree
    let cutoff = max_abs * (1.0 - ORIENT_TIE_TOL);
    let mut sign = 0.0;
    for p in points {
        let proj = e.dot(&(p - center));
        if proj.abs() >= cutoff {
            if sign == 0.0 {
                sign = proj.signum();
            } else if sign != proj.signum() {
                return None;
            }
        }
    }
    Some(sign)
}

/// Eigenvalue-based degeneracy: rank deficiency or non-identifiable
/// eigenvectors (repeated eigenvalues).
fn spectrum_degenerate(values: &Vector3<f64>, check_rank: bool) -> bool {
    let l1 = values[0];
    if !(l1 > 0.0) {
        return true;
    }
    if check_rank && values[2] / l1 < RANK_RATIO_TOL {
        return true;
    }
    (values[0] - values[1]) < EIGEN_GAP_TOL * l1 || (values[1] - values[2]) < EIGEN_GAP_TOL * l1
}

/// PCA frame of a point set about `center`, with the orientation convention.
pub fn pca_frame(points: &[Point3], center: &Point3, check_rank: bool) -> Frame {
    let (_, cov) = covariance(points.iter());
    let eig = symmetric_eigen3(&cov);
    let mut frame = orient_frame(&eig.vectors, points, center);
    frame.degenerate |= spectrum_degenerate(&eig.values, check_rank);
    frame
}

/// Frame of the whole cloud: eigenvectors of the global covariance, oriented
/// about the centroid. Planar clouds are accepted; only repeated eigenvalues
/// and unresolved signs flag it.
pub fn global_pca_frame(points: &[Point3]) -> Frame {
    let c = crate::geometry::centroid(points);
    pca_frame(points, &c, false)
}

/// Per-point PCA frame of the `k` nearest neighbors (clamped to N), oriented
/// about the point itself. Degenerate neighborhoods fall back to the global
/// PCA frame and stay flagged.
pub fn local_pca_lrf(cloud: &PointCloud, k: usize) -> Result<Vec<Frame>> {
    if k < 3 {
        return Err(Error::invalid(format!("local_pca_lrf: k must be >= 3, got {k}")));
    }
    let pts = cloud.points();
    let k = k.min(pts.len());
    let nb = knn(pts, pts, k)?;
    let mut fallback: Option<Frame> = None;
    let mut out = Vec::with_capacity(pts.len());
    let mut hood = Vec::with_capacity(k);
    for (i, list) in nb.iter().enumerate() {
        hood.clear();
        hood.extend(list.iter().map(|&j| pts[j]));
        let mut frame = pca_frame(&hood, &pts[i], true);
        if frame.degenerate {
            let g = *fallback.get_or_insert_with(|| global_pca_frame(pts));
            frame = Frame {
                rotation: g.rotation,
                degenerate: true,
            };
        }
        out.push(frame);
    }
    Ok(out)
}

/// One frame per scale for every point (`J = scales.len()`).
pub fn multi_scale_lrf_init(cloud: &PointCloud, scales: &[usize]) -> Result<LrfSet> {
    if scales.is_empty() {
        return Err(Error::invalid("multi_scale_lrf_init: no scales"));
    }
    let n = cloud.len();
    let per_scale: Vec<Vec<Frame>> = scales
        .iter()
        .map(|&k| local_pca_lrf(cloud, k))
        .collect::<Result<_>>()?;
    let j_count = scales.len();
    let mut frames = Vec::with_capacity(n * j_count);
    let mut flags = Vec::with_capacity(n * j_count);
    for p in 0..n {
        for s in &per_scale {
            frames.push(*s[p].rotation.matrix());
            flags.push(s[p].degenerate);
        }
    }
    LrfSet::new(j_count, frames, flags)
}

/// Every point gets the global PCA frame, repeated `frame_count` times.
pub fn global_lrf_init(cloud: &PointCloud, frame_count: usize) -> LrfSet {
    let g = global_pca_frame(cloud.points());
    LrfSet {
        frame_count,
        frames: vec![*g.rotation.matrix(); cloud.len() * frame_count],
        degenerate: vec![g.degenerate; cloud.len() * frame_count],
    }
}

/// Each new point takes the frame stack of its nearest original point.
pub fn pool_lrf_nearest(source: &LrfSet, carry: &[usize]) -> Result<LrfSet> {
    let n = source.point_count();
    if let Some(&bad) = carry.iter().find(|&&i| i >= n) {
        return Err(Error::invalid(format!("pool_lrf_nearest: index {bad} >= {n}")));
    }
    let mut frames = Vec::with_capacity(carry.len() * source.frame_count);
    let mut flags = Vec::with_capacity(carry.len() * source.frame_count);
    for &i in carry {
        frames.extend_from_slice(source.stack(i));
        flags.extend_from_slice(&source.degenerate[i * source.frame_count..(i + 1) * source.frame_count]);
    }
    LrfSet::new(source.frame_count, frames, flags)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    use super::*;
    use crate::geometry::{apply_rotation, sample_uniform_rotation};

    fn generic_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = (0..n)
            .map(|_| {
                Point3::new(
                    rng.gen_range(-1.0..1.0) * 1.5,
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0) * 0.6 + 0.2,
                )
            })
            .collect();
        PointCloud::from_points(pts).unwrap()
    }

    fn frames_close(a: &Matrix3<f64>, b: &Matrix3<f64>, tol: f64) -> bool {
        (a - b).abs().max() <= tol
    }

    #[test]
    fn orientation_follows_projection_sum() {
        let e = Matrix3::identity();
        let center = Point3::zeros();
        let pts = vec![Point3::new(1.0, 0.5, 0.0), Point3::new(2.0, 0.2, 0.1)];
        let f = orient_frame(&e, &pts, &center);
        assert_eq!(f.rotation.matrix().column(0).into_owned(), Vector3::x());
        let mirrored: Vec<Point3> = pts.iter().map(|p| Point3::new(-p.x, p.y, p.z)).collect();
        let f = orient_frame(&e, &mirrored, &center);
        assert_eq!(f.rotation.matrix().column(0).into_owned(), -Vector3::x());
        assert!((f.rotation.matrix().determinant() - 1.0).abs() < 1e-15);
        assert!(!f.degenerate);
    }

    #[test]
    fn orientation_tie_uses_largest_projection_or_flags() {
        let e = Matrix3::identity();
        let c = Point3::zeros();
        // x-sum is zero, the largest |x| is positive
        let pts = vec![Point3::new(-1.0, 1.0, 0.0), Point3::new(-1.0, 1.0, 0.0), Point3::new(2.0, 1.0, 0.0)];
        let f = orient_frame(&e, &pts, &c);
        assert_eq!(f.rotation.matrix()[(0, 0)], 1.0);
        assert!(!f.degenerate);
        // perfectly symmetric in x
        let pts = vec![Point3::new(-1.0, 1.0, 0.0), Point3::new(1.0, 1.0, 0.0)];
        assert!(orient_frame(&e, &pts, &c).degenerate);
    }

    #[test]
    fn orientation_commutes_with_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let pts: Vec<Point3> = (0..12)
                .map(|_| Point3::from_fn(|_, _| rng.sample(StandardNormal)))
                .collect();
            let c = Point3::from_fn(|_, _| rng.gen_range(-0.3..0.3));
            let v = *sample_uniform_rotation(&mut rng).matrix();
            let r = sample_uniform_rotation(&mut rng);
            let rp: Vec<Point3> = pts.iter().map(|p| r.apply(p)).collect();
            let a = orient_frame(&(r.matrix() * v), &rp, &r.apply(&c));
            let b = orient_frame(&v, &pts, &c);
            assert!(frames_close(a.rotation.matrix(), &(r.matrix() * b.rotation.matrix()), 1e-12));
        }
    }

    #[test]
    fn elongated_segment_gives_axis_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Point3> = (0..60)
            .map(|i| {
                Point3::new(
                    i as f64 * 0.05,
                    rng.gen_range(-1e-3..1e-3),
                    rng.gen_range(-1e-3..1e-3),
                )
            })
            .collect();
        let cloud = PointCloud::from_points(pts).unwrap();
        let frames = local_pca_lrf(&cloud, 60).unwrap();
        for (i, f) in frames.iter().enumerate() {
            assert!(!f.degenerate);
            let e1 = f.rotation.matrix().column(0);
            assert!((e1.x.abs() - 1.0).abs() < 1e-6, "point {i}: {e1:?}");
        }
        // the first point sees all others on its +x side
        assert!(frames[0].rotation.matrix()[(0, 0)] > 0.0);
        assert!(frames[59].rotation.matrix()[(0, 0)] < 0.0);
    }

    #[test]
    fn anisotropic_gaussian_axes_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<Point3> = (0..2000)
            .map(|_| {
                let g = |rng: &mut ChaCha8Rng| rng.sample::<f64, _>(StandardNormal);
                Point3::new(3.0 * g(&mut rng), 2.0 * g(&mut rng), g(&mut rng))
            })
            .collect();
        let cloud = PointCloud::from_points(pts).unwrap();
        let frames = local_pca_lrf(&cloud, 2000).unwrap();
        let cos5 = 5f64.to_radians().cos();
        let m = frames[0].rotation.matrix();
        for (col, axis) in [Vector3::x(), Vector3::y(), Vector3::z()].iter().enumerate() {
            assert!(m.column(col).dot(axis).abs() > cos5, "column {col}");
        }
    }

    #[test]
    fn local_frames_are_rotations_and_equivariant() {
        let cloud = generic_cloud(300, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let base = local_pca_lrf(&cloud, 20).unwrap();
        for f in &base {
            let m = f.rotation.matrix();
            assert!((m.transpose() * m - Matrix3::identity()).abs().max() < 1e-9);
            assert!((m.determinant() - 1.0).abs() < 1e-9);
        }
        for _ in 0..8 {
            let r = sample_uniform_rotation(&mut rng);
            let rotated = local_pca_lrf(&apply_rotation(&r, &cloud), 20).unwrap();
            for (a, b) in rotated.iter().zip(&base) {
                assert!(!a.degenerate);
                assert!(frames_close(a.rotation.matrix(), &(r.matrix() * b.rotation.matrix()), 1e-9));
            }
        }
    }

    #[test]
    fn planar_neighborhood_is_flagged_with_global_fallback() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<Point3> = (0..50)
            .map(|_| Point3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-0.5..0.5), 0.0))
            .collect();
        let cloud = PointCloud::from_points(pts).unwrap();
        let frames = local_pca_lrf(&cloud, 10).unwrap();
        let g = global_pca_frame(cloud.points());
        assert!(!g.degenerate);
        for f in frames {
            assert!(f.degenerate);
            assert_eq!(f.rotation.matrix(), g.rotation.matrix());
        }
    }

    #[test]
    fn multi_scale_shapes_and_clamping() {
        let cloud = generic_cloud(100, 11);
        let one = multi_scale_lrf_init(&cloud, &[20]).unwrap();
        let direct = local_pca_lrf(&cloud, 20).unwrap();
        assert_eq!(one.frame_count(), 1);
        for (p, f) in direct.iter().enumerate() {
            assert_eq!(one.get(p, 0), f.rotation.matrix());
        }
        let four = multi_scale_lrf_init(&cloud, &DEFAULT_LRF_SCALES).unwrap();
        assert_eq!(four.frame_count(), 4);
        let clamped = local_pca_lrf(&cloud, 100).unwrap();
        for (p, f) in clamped.iter().enumerate() {
            assert_eq!(four.get(p, 3), f.rotation.matrix());
        }
        assert!(multi_scale_lrf_init(&cloud, &[]).is_err());
        assert!(local_pca_lrf(&cloud, 2).is_err());
    }

    #[test]
    fn pooling_copies_stacks() {
        let cloud = generic_cloud(30, 12);
        let set = multi_scale_lrf_init(&cloud, &[5, 10]).unwrap();
        let ident: Vec<usize> = (0..30).collect();
        assert_eq!(pool_lrf_nearest(&set, &ident).unwrap(), set);
        let pooled = pool_lrf_nearest(&set, &[0]).unwrap();
        assert_eq!(pooled.stack(0), set.stack(0));
        assert!(pool_lrf_nearest(&set, &[30]).is_err());
    }

    #[test]
    fn tensor_packing_round_trips() {
        let cloud = generic_cloud(10, 13);
        let set = multi_scale_lrf_init(&cloud, &[4, 6]).unwrap();
        let back = LrfSet::from_tensor(&set.to_tensor()).unwrap();
        assert_eq!(back.frames(), set.frames());
        assert_eq!(set.to_tensor().get(2, 9 + 3 + 2), set.get(2, 1)[(1, 2)]);
    }
}
