//! Kernel point convolution: the standard operator, the aligned inputs and
//! the multi-alignment operator, as single-query references and as a batched
//! differentiable layer.

mod kernel;
mod layer;

use nalgebra::{Matrix3, Vector3};

pub use kernel::{
    generate_kernel_points, load_or_generate_kernel_points, KernelDisposition, DEFAULT_KERNEL_COUNT,
    DEFAULT_SIGMA_RATIO,
};
pub use layer::{AlignedConv, LrfMlp, PairGeometry};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::geometry::Point3;
use crate::lrf::LrfSet;

/// Linear influence `max(0, 1 − ‖offset − x̃_k‖/σ)`.
pub fn influence(offset: &Vector3<f64>, kernel_point: &[f64; 3], sigma: f64) -> f64 {
    let (dx, dy, dz) = (
        offset[0] - kernel_point[0],
        offset[1] - kernel_point[1],
        offset[2] - kernel_point[2],
    );
    let d = (dx * dx + dy * dy + dz * dz).sqrt();
    if d < sigma {
        1.0 - d / sigma
    } else {
        0.0
    }
}

/// Weights of the MLP encoding realigned neighbor frames:
/// `relu(x W₁ + b₁) W₂ + b₂`.
#[derive(Clone, Debug, PartialEq)]
pub struct LrfMlpWeights {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl LrfMlpWeights {
    pub fn input_width(&self) -> usize {
        self.w1.rows()
    }

    pub fn output_width(&self) -> usize {
        self.w2.cols()
    }

    pub fn apply(&self, input: &[f64]) -> Vec<f64> {
        let hidden: Vec<f64> = (0..self.w1.cols())
            .map(|h| {
                let v = input
                    .iter()
                    .enumerate()
                    .fold(self.b1.get(0, h), |acc, (i, x)| acc + x * self.w1.get(i, h));
                v.max(0.0)
            })
            .collect();
        (0..self.w2.cols())
            .map(|o| {
                hidden
                    .iter()
                    .enumerate()
                    .fold(self.b2.get(0, o), |acc, (h, x)| acc + x * self.w2.get(h, o))
            })
            .collect()
    }
}

/// `R_{x,j}ᵀ R_{i,j}` for every `j`, each flattened row-major, concatenated.
pub fn flatten_relative_frames(query: &[Matrix3<f64>], neighbor: &[Matrix3<f64>]) -> Vec<f64> {
    let mut out = Vec::with_capacity(9 * query.len());
    for (rx, ri) in query.iter().zip(neighbor) {
        let rel = rx.transpose() * ri;
        for r in 0..3 {
            for c in 0..3 {
                out.push(rel[(r, c)]);
            }
        }
    }
    out
}

/// Offsets and features of a neighborhood after alignment.
#[derive(Clone, Debug)]
pub struct AlignedInputs {
    /// `offsets[j][n] = R_{x,j}ᵀ (x_n − x)` for each neighbor `n`.
    pub offsets: Vec<Vec<Vector3<f64>>>,
    /// `[f_n, mlp(R_xᵀ R_n)]` per neighbor, or just `f_n` without an MLP.
    pub features: Tensor,
}

/// Aligns a neighborhood with the query's frame stack and, if `mlp` is given,
/// appends the encoded realigned neighbor frames to the features.
pub fn align_inputs(
    query: &Point3,
    query_frames: &[Matrix3<f64>],
    points: &[Point3],
    neighbors: &[usize],
    frames: &LrfSet,
    features: &Tensor,
    mlp: Option<&LrfMlpWeights>,
) -> Result<AlignedInputs> {
    let j_count = query_frames.len();
    if j_count != frames.frame_count() || frames.point_count() != points.len() {
        return Err(Error::invalid(format!(
            "align_inputs: {j_count} query frames vs {} per point over {} points ({} expected)",
            frames.frame_count(),
            frames.point_count(),
            points.len()
        )));
    }
    let c = features.cols();
    if let Some(m) = mlp {
        if m.input_width() != 9 * j_count || m.output_width() != c {
            return Err(Error::invalid(format!(
                "align_inputs: mlp maps {} -> {}, expected {} -> {c}",
                m.input_width(),
                m.output_width(),
                9 * j_count
            )));
        }
    }
    let width = if mlp.is_some() { 2 * c } else { c };
    let mut offsets = vec![Vec::with_capacity(neighbors.len()); j_count];
    let mut out = Tensor::zeros(neighbors.len(), width);
    for (n, &i) in neighbors.iter().enumerate() {
        let d = points[i] - query;
        for (j, rx) in query_frames.iter().enumerate() {
            offsets[j].push(rx.transpose() * d);
        }
        let row = out.row_mut(n);
        row[..c].copy_from_slice(features.row(i));
        if let Some(m) = mlp {
            let enc = m.apply(&flatten_relative_frames(query_frames, frames.stack(i)));
            row[c..].copy_from_slice(&enc);
        }
    }
    Ok(AlignedInputs {
        offsets,
        features: out,
    })
}

/// `Σ_i Σ_k h(x_i − x, x̃_k) f_i W_k`, evaluated by aggregating per kernel
/// point first. `weights[k]` is `W_k` (input width × output width).
pub fn kpconv_standard(
    query: &Point3,
    points: &[Point3],
    neighbors: &[usize],
    features: &Tensor,
    disposition: &KernelDisposition,
    weights: &[Tensor],
) -> Result<Vec<f64>> {
    if weights.len() != disposition.len() {
        return Err(Error::invalid(format!(
            "kpconv_standard: {} weight matrices for {} kernel points",
            weights.len(),
            disposition.len()
        )));
    }
    let c = features.cols();
    let d_out = weights[0].cols();
    if weights.iter().any(|w| w.shape() != (c, d_out)) {
        return Err(Error::invalid("kpconv_standard: kernel weight shapes differ from feature width"));
    }
    let mut out = vec![0.0; d_out];
    for (k, kp) in disposition.points().iter().enumerate() {
        let mut agg = vec![0.0; c];
        for &i in neighbors {
            let h = influence(&(points[i] - query), kp, disposition.sigma());
            if h != 0.0 {
                for (a, f) in agg.iter_mut().zip(features.row(i)) {
                    *a += h * f;
                }
            }
        }
        for (ci, a) in agg.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(weights[k].row(ci)) {
                *o += a * w;
            }
        }
    }
    Ok(out)
}

/// Multi-alignment convolution for one query: per kernel point, the aligned
/// aggregates of all `J` frames are concatenated into `f_k''` and the output
/// is `Σ_k f_k'' W_k`. `weights` stacks the `W_k` vertically, so row
/// `k·J·C' + j·C' + c` multiplies channel `c` of alignment `j`.
#[allow(clippy::too_many_arguments)]
pub fn multi_align_kpconv(
    query: &Point3,
    query_frames: &[Matrix3<f64>],
    points: &[Point3],
    neighbors: &[usize],
    frames: &LrfSet,
    features: &Tensor,
    disposition: &KernelDisposition,
    weights: &Tensor,
    mlp: Option<&LrfMlpWeights>,
) -> Result<Vec<f64>> {
    let aligned = align_inputs(query, query_frames, points, neighbors, frames, features, mlp)?;
    let (k_count, j_count) = (disposition.len(), query_frames.len());
    let cp = aligned.features.cols();
    if weights.rows() != k_count * j_count * cp {
        return Err(Error::invalid(format!(
            "multi_align_kpconv: weight rows {} != K·J·C' = {}",
            weights.rows(),
            k_count * j_count * cp
        )));
    }
    let mut agg = vec![0.0; k_count * j_count * cp];
    for n in 0..neighbors.len() {
        let f = aligned.features.row(n);
        for j in 0..j_count {
            let y = &aligned.offsets[j][n];
            for (k, kp) in disposition.points().iter().enumerate() {
                let h = influence(y, kp, disposition.sigma());
                if h == 0.0 {
                    continue;
                }
                let base = k * j_count * cp + j * cp;
                for (a, fv) in agg[base..base + cp].iter_mut().zip(f) {
                    *a += h * fv;
                }
            }
        }
    }
    let mut out = vec![0.0; weights.cols()];
    for (r, a) in agg.iter().enumerate() {
        if *a != 0.0 {
            for (o, w) in out.iter_mut().zip(weights.row(r)) {
                *o += a * w;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::geometry::{sample_uniform_rotation, Rotation3};
    use crate::layers::normal_tensor;

    #[test]
    fn influence_is_linear_in_distance() {
        let kp = [0.1, 0.2, -0.3];
        let at = Vector3::new(0.1, 0.2, -0.3);
        assert_eq!(influence(&at, &kp, 0.5), 1.0);
        assert_eq!(influence(&(at + Vector3::new(0.5, 0.0, 0.0)), &kp, 0.5), 0.0);
        assert!((influence(&(at + Vector3::new(0.0, 0.25, 0.0)), &kp, 0.5) - 0.5).abs() < 1e-15);
    }

    fn random_setup(rng: &mut ChaCha8Rng, n: usize, c: usize, j: usize) -> (Vec<Point3>, Tensor, LrfSet) {
        let pts: Vec<Point3> = (0..n)
            .map(|_| Point3::from_fn(|_, _| rng.gen_range(-0.4..0.4)))
            .collect();
        let feats = normal_tensor(n, c, 1.0, rng);
        let frames = (0..n * j).map(|_| *sample_uniform_rotation(rng).matrix()).collect();
        (pts, feats, LrfSet::new(j, frames, vec![false; n * j]).unwrap())
    }

    fn double_sum_oracle(
        q: &Point3,
        pts: &[Point3],
        nb: &[usize],
        f: &Tensor,
        d: &KernelDisposition,
        w: &[Tensor],
    ) -> Vec<f64> {
        let mut out = vec![0.0; w[0].cols()];
        for &i in nb {
            for (k, kp) in d.points().iter().enumerate() {
                let h = influence(&(pts[i] - q), kp, d.sigma());
                for o in 0..out.len() {
                    for c in 0..f.cols() {
                        out[o] += h * f.get(i, c) * w[k].get(c, o);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn standard_conv_passes_a_single_aligned_neighbor_through() {
        let d = KernelDisposition::new(vec![[0.0; 3], [0.5, 0.0, 0.0]], 1.0, 0.3).unwrap();
        let pts = vec![Point3::zeros(), Point3::new(0.5, 0.0, 0.0)];
        let f = Tensor::from_rows(&[vec![0.0, 0.0], vec![2.0, -3.0]]);
        let w = vec![Tensor::zeros(2, 2), Tensor::identity(2)];
        let out = kpconv_standard(&pts[0], &pts, &[1], &f, &d, &w).unwrap();
        assert_eq!(out, vec![2.0, -3.0]);
        let zero = kpconv_standard(&pts[0], &pts, &[1], &Tensor::zeros(2, 2), &d, &w).unwrap();
        assert_eq!(zero, vec![0.0, 0.0]);
        let empty = kpconv_standard(&pts[0], &pts, &[], &f, &d, &w).unwrap();
        assert_eq!(empty, vec![0.0, 0.0]);
    }

    #[test]
    fn standard_conv_matches_double_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = generate_kernel_points(15, 0.6, 0).unwrap().with_sigma(0.25).unwrap();
        for _ in 0..20 {
            let (pts, f, _) = random_setup(&mut rng, 6, 3, 1);
            let w: Vec<Tensor> = (0..15).map(|_| normal_tensor(3, 4, 1.0, &mut rng)).collect();
            let nb = [1, 2, 3, 4, 5];
            let a = kpconv_standard(&pts[0], &pts, &nb, &f, &d, &w).unwrap();
            let b = double_sum_oracle(&pts[0], &pts, &nb, &f, &d, &w);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-12);
            }
            let perm = [4, 2, 5, 1, 3];
            let c = kpconv_standard(&pts[0], &pts, &perm, &f, &d, &w).unwrap();
            for (x, y) in a.iter().zip(&c) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn aligned_offsets_by_hand() {
        let rx = *Rotation3::about_z(std::f64::consts::FRAC_PI_2).matrix();
        let pts = vec![Point3::zeros(), Point3::x()];
        let frames = LrfSet::identity(2, 1);
        let f = Tensor::filled(2, 1, 1.0);
        let a = align_inputs(&pts[0], &[rx], &pts, &[1], &frames, &f, None).unwrap();
        assert!((a.offsets[0][0] - Vector3::new(0.0, -1.0, 0.0)).norm() < 1e-15);
        let ident = flatten_relative_frames(&[Matrix3::identity()], &[Matrix3::identity()]);
        assert_eq!(ident, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    }

    fn random_mlp(rng: &mut ChaCha8Rng, j: usize, c: usize) -> LrfMlpWeights {
        LrfMlpWeights {
            w1: normal_tensor(9 * j, 2 * c, 0.5, rng),
            b1: normal_tensor(1, 2 * c, 0.1, rng),
            w2: normal_tensor(2 * c, c, 0.5, rng),
            b2: normal_tensor(1, c, 0.1, rng),
        }
    }

    #[test]
    fn aligned_inputs_are_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (pts, f, frames) = random_setup(&mut rng, 8, 3, 2);
        let mlp = random_mlp(&mut rng, 2, 3);
        let nb: Vec<usize> = (1..8).collect();
        let base = align_inputs(&pts[0], frames.stack(0), &pts, &nb, &frames, &f, Some(&mlp)).unwrap();
        assert_eq!(base.features.cols(), 6);
        let r = sample_uniform_rotation(&mut rng);
        let rp: Vec<Point3> = pts.iter().map(|p| r.apply(p)).collect();
        let rf = frames.rotated(&r);
        let rot = align_inputs(&rp[0], rf.stack(0), &rp, &nb, &rf, &f, Some(&mlp)).unwrap();
        assert!((rot.features.data().iter().zip(base.features.data()))
            .all(|(a, b)| (a - b).abs() < 1e-12));
        for j in 0..2 {
            for (a, b) in rot.offsets[j].iter().zip(&base.offsets[j]) {
                assert!((a - b).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn multi_align_reduces_to_standard() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = generate_kernel_points(15, 0.6, 0).unwrap().with_sigma(0.25).unwrap();
        let (pts, f, _) = random_setup(&mut rng, 6, 3, 1);
        let frames = LrfSet::identity(6, 1);
        let w: Vec<Tensor> = (0..15).map(|_| normal_tensor(3, 2, 1.0, &mut rng)).collect();
        let mut stacked = Tensor::zeros(45, 2);
        for k in 0..15 {
            for c in 0..3 {
                stacked.row_mut(3 * k + c).copy_from_slice(w[k].row(c));
            }
        }
        let nb = [0, 1, 2, 3, 4, 5];
        let a = kpconv_standard(&pts[0], &pts, &nb, &f, &d, &w).unwrap();
        let b = multi_align_kpconv(&pts[0], frames.stack(0), &pts, &nb, &frames, &f, &d, &stacked, None)
            .unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn multi_align_is_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = generate_kernel_points(15, 0.6, 0).unwrap().with_sigma(0.25).unwrap();
        let (pts, f, frames) = random_setup(&mut rng, 10, 2, 3);
        let mlp = random_mlp(&mut rng, 3, 2);
        let w = normal_tensor(15 * 3 * 4, 5, 1.0, &mut rng);
        let nb: Vec<usize> = (0..10).collect();
        let base = multi_align_kpconv(&pts[0], frames.stack(0), &pts, &nb, &frames, &f, &d, &w, Some(&mlp))
            .unwrap();
        assert!(base.iter().any(|v| v.abs() > 1e-3));
        for _ in 0..8 {
            let r = sample_uniform_rotation(&mut rng);
            let rp: Vec<Point3> = pts.iter().map(|p| r.apply(p)).collect();
            let rf = frames.rotated(&r);
            let out = multi_align_kpconv(&rp[0], rf.stack(0), &rp, &nb, &rf, &f, &d, &w, Some(&mlp)).unwrap();
            for (x, y) in out.iter().zip(&base) {
                assert!((x - y).abs() < 1e-10 * (1.0 + y.abs()));
            }
        }
    }
}
