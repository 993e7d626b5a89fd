use nalgebra::Matrix3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::AuditReport;
use crate::autodiff::Tensor;
use crate::conv::{generate_kernel_points, kpconv_standard, multi_align_kpconv, KernelDisposition, LrfMlpWeights};
use crate::error::Result;
use crate::geometry::{knn, radius_neighbors, sample_uniform_rotation, Point3};
use crate::layers::normal_tensor;
use crate::lrf::{symmetric_eigen3, LrfSet};

/// Every index within distance `r` (inclusive), ascending, by exhaustive scan.
pub fn brute_radius(input: &[Point3], query: &Point3, r: f64) -> Vec<usize> {
    (0..input.len())
        .filter(|&i| (input[i] - query).norm_squared() <= r * r)
        .collect()
}

/// The `k` nearest indices by full sort (ties by lower index).
pub fn brute_knn(input: &[Point3], query: &Point3, k: usize) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = input
        .iter()
        .enumerate()
        .map(|(i, p)| ((p - query).norm_squared(), i))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(_, i)| i).collect()
}

fn hat(d: f64, sigma: f64) -> f64 {
    (1.0 - d / sigma).max(0.0)
}

/// `Σ_i Σ_k h(x_i − x, x̃_k) f_i W_k` as a literal double loop.
pub fn kpconv_double_sum(
    query: &Point3,
    points: &[Point3],
    neighbors: &[usize],
    features: &Tensor,
    disposition: &KernelDisposition,
    weights: &[Tensor],
) -> Vec<f64> {
    let d_out = weights.first().map_or(0, Tensor::cols);
    let mut out = vec![0.0; d_out];
    for &i in neighbors {
        let y = points[i] - query;
        for (k, kp) in disposition.points().iter().enumerate() {
            let d = (y - Point3::new(kp[0], kp[1], kp[2])).norm();
            let h = hat(d, disposition.sigma());
            for o in 0..d_out {
                for c in 0..features.cols() {
                    out[o] += h * features.get(i, c) * weights[k].get(c, o);
                }
            }
        }
    }
    out
}

/// Multi-aligned convolution as a literal loop over neighbors, frames,
/// kernel points and channels.
#[allow(clippy::too_many_arguments)]
fn aligned_double_sum(
    q: usize,
    points: &[Point3],
    neighbors: &[usize],
    frames: &LrfSet,
    features: &Tensor,
    disposition: &KernelDisposition,
    weights: &Tensor,
    mlp: &LrfMlpWeights,
) -> Vec<f64> {
    let j_count = frames.frame_count();
    let c = features.cols();
    let cp = 2 * c;
    let mut out = vec![0.0; weights.cols()];
    for &i in neighbors {
        let mut rel = Vec::new();
        for j in 0..j_count {
            let m = frames.get(q, j).transpose() * frames.get(i, j);
            for r in 0..3 {
                for cc in 0..3 {
                    rel.push(m[(r, cc)]);
                }
            }
        }
        let hidden: Vec<f64> = (0..mlp.w1.cols())
            .map(|h| {
                let mut s = mlp.b1.get(0, h);
                for (a, x) in rel.iter().enumerate() {
                    s += x * mlp.w1.get(a, h);
                }
                s.max(0.0)
            })
            .collect();
        let mut f = features.row(i).to_vec();
        for o in 0..c {
            let mut s = mlp.b2.get(0, o);
            for (h, x) in hidden.iter().enumerate() {
                s += x * mlp.w2.get(h, o);
            }
            f.push(s);
        }
        for j in 0..j_count {
            let y = frames.get(q, j).transpose() * (points[i] - points[q]);
            for (k, kp) in disposition.points().iter().enumerate() {
                let h = hat((y - Point3::new(kp[0], kp[1], kp[2])).norm(), disposition.sigma());
                for (ch, fv) in f.iter().enumerate() {
                    let row = k * j_count * cp + j * cp + ch;
                    for (o, acc) in out.iter_mut().enumerate() {
                        *acc += h * fv * weights.get(row, o);
                    }
                }
            }
        }
    }
    out
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize, clustered: bool) -> Vec<Point3> {
    (0..n)
        .map(|_| {
            if clustered {
                // coarse lattice with duplicates and exact distance ties
                Point3::new(
                    rng.gen_range(-3..=3) as f64 * 0.25,
                    rng.gen_range(-3..=3) as f64 * 0.25,
                    rng.gen_range(-3..=3) as f64 * 0.25,
                )
            } else {
                Point3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal))
            }
        })
        .collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Fast routines against exhaustive versions on `instances` random inputs
/// each: radius and knn neighborhoods (count of mismatching queries, exact),
/// the convolutions against literal double sums (including an empty
/// neighborhood), and the Jacobi eigensolver against nalgebra.
pub fn brute_force_oracles(seed: u64, instances: usize) -> Result<Vec<AuditReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut radius_bad, mut knn_bad) = (0usize, 0usize);
    for t in 0..instances {
        let n = rng.gen_range(1..=500);
        let pts = random_cloud(&mut rng, n, t % 2 == 1);
        let queries = random_cloud(&mut rng, 10, t % 2 == 1);
        let r = rng.gen_range(0.05..1.5);
        let nb = radius_neighbors(&pts, &queries, r)?;
        let k = rng.gen_range(1..=n.min(30));
        let kn = knn(&pts, &queries, k)?;
        for (qi, q) in queries.iter().enumerate() {
            radius_bad += usize::from(nb.get(qi) != brute_radius(&pts, q, r).as_slice());
            knn_bad += usize::from(kn.get(qi) != brute_knn(&pts, q, k).as_slice());
        }
    }
    let mut reports = vec![
        AuditReport::new("radius_neighbors vs brute force", instances * 10, radius_bad as f64, 0.0, 0),
        AuditReport::new("knn vs brute force", instances * 10, knn_bad as f64, 0.0, 0),
    ];

    let radius = 0.8;
    let disp = generate_kernel_points(15, 0.66 * radius, seed)?.with_sigma(0.3 * radius)?;
    let k = disp.len();
    let (mut std_dev, mut align_dev, mut empty_seen) = (0.0f64, 0.0f64, 0usize);
    for _ in 0..instances {
        let n = rng.gen_range(2..=40);
        let pts: Vec<Point3> = random_cloud(&mut rng, n, false).iter().map(|p| p * 0.5).collect();
        let c = rng.gen_range(1..=4);
        let d_out = rng.gen_range(1..=3);
        let feats = normal_tensor(n, c, 1.0, &mut rng);
        let w: Vec<Tensor> = (0..k).map(|_| normal_tensor(c, d_out, 1.0, &mut rng)).collect();
        // one query far away so its neighborhood is empty
        let mut queries: Vec<Point3> = pts.iter().take(5).copied().collect();
        queries.push(Point3::new(50.0, 0.0, 0.0));
        let nb = radius_neighbors(&pts, &queries, radius)?;
        for (qi, q) in queries.iter().enumerate() {
            empty_seen += usize::from(nb.get(qi).is_empty());
            let fast = kpconv_standard(q, &pts, nb.get(qi), &feats, &disp, &w)?;
            std_dev = std_dev.max(max_abs_diff(&fast, &kpconv_double_sum(q, &pts, nb.get(qi), &feats, &disp, &w)));
        }

        let j_count = rng.gen_range(1..=3);
        let frames: Vec<Matrix3<f64>> = (0..n * j_count)
            .map(|_| *sample_uniform_rotation(&mut rng).matrix())
            .collect();
        let frames = LrfSet::new(j_count, frames, vec![false; n * j_count])?;
        let mlp = LrfMlpWeights {
            w1: normal_tensor(9 * j_count, 2 * c, 0.5, &mut rng),
            b1: normal_tensor(1, 2 * c, 0.1, &mut rng),
            w2: normal_tensor(2 * c, c, 0.5, &mut rng),
            b2: normal_tensor(1, c, 0.1, &mut rng),
        };
        let wa = normal_tensor(k * j_count * 2 * c, d_out, 1.0, &mut rng);
        let nb = radius_neighbors(&pts, &pts, radius)?;
        for q in 0..n.min(5) {
            let fast = multi_align_kpconv(&pts[q], frames.stack(q), &pts, nb.get(q), &frames, &feats, &disp, &wa, Some(&mlp))?;
            let slow = aligned_double_sum(q, &pts, nb.get(q), &frames, &feats, &disp, &wa, &mlp);
            align_dev = align_dev.max(max_abs_diff(&fast, &slow));
        }
    }
    if empty_seen == 0 {
        std_dev = f64::INFINITY;
    }
    reports.push(AuditReport::new("kpconv_standard vs double sum", instances, std_dev, 1e-12, 0));
    reports.push(AuditReport::new("multi_align_kpconv vs double sum", instances, align_dev, 1e-12, 0));

    let mut eig_dev = 0.0f64;
    for _ in 0..instances {
        let b = Matrix3::<f64>::from_fn(|_, _| rng.sample(StandardNormal));
        let a = b * b.transpose();
        let ours = symmetric_eigen3(&a);
        let mut reference: Vec<f64> = nalgebra::SymmetricEigen::new(a).eigenvalues.iter().copied().collect();
        reference.sort_by(|x, y| y.total_cmp(x));
        let scale = 1.0 + reference[0].abs();
        for (i, &lambda) in reference.iter().enumerate() {
            eig_dev = eig_dev.max((ours.values[i] - lambda).abs() / scale);
            // residual ‖A v − λ v‖ and unit norm of our eigenvector
            let v = ours.vectors.column(i);
            eig_dev = eig_dev.max((a * v - v * ours.values[i]).norm() / scale);
            eig_dev = eig_dev.max((v.norm() - 1.0).abs());
        }
        eig_dev = eig_dev.max((ours.vectors.transpose() * ours.vectors - Matrix3::identity()).norm());
    }
    reports.push(AuditReport::new("jacobi eigen vs nalgebra", instances, eig_dev, 1e-10, 0));
    Ok(reports)
}
