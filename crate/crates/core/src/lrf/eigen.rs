use nalgebra::{Matrix3, Vector3};

/// Eigen-decomposition of a symmetric 3×3 matrix.
#[derive(Clone, Copy, Debug)]
pub struct SymmetricEigen3 {
    /// Descending eigenvalues.
    pub values: Vector3<f64>,
    /// Unit eigenvectors as columns, in the order of `values`.
    pub vectors: Matrix3<f64>,
}

const MAX_SWEEPS: usize = 64;
const CONVERGENCE: f64 = 1e-14;

/// Cyclic Jacobi rotations until the off-diagonal mass falls below
/// `1e-14 · ‖A‖_F`. Only the upper triangle of `a` is read.
pub fn symmetric_eigen3(a: &Matrix3<f64>) -> SymmetricEigen3 {
    let mut m = *a;
    for r in 0..3 {
        for c in 0..r {
            m[(r, c)] = m[(c, r)];
        }
    }
    let mut v = Matrix3::<f64>::identity();
    let scale = m.norm();
    if scale > 0.0 {
        for _ in 0..MAX_SWEEPS {
            let off = (m[(0, 1)].powi(2) + m[(0, 2)].powi(2) + m[(1, 2)].powi(2)).sqrt();
            if off <= CONVERGENCE * scale {
                break;
            }
            for (p, q) in [(0, 1), (0, 2), (1, 2)] {
                rotate(&mut m, &mut v, p, q);
            }
        }
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| m[(j, j)].total_cmp(&m[(i, i)]).then(i.cmp(&j)));
    let values = Vector3::new(m[(order[0], order[0])], m[(order[1], order[1])], m[(order[2], order[2])]);
    let vectors = Matrix3::from_columns(&[v.column(order[0]), v.column(order[1]), v.column(order[2])]);
    SymmetricEigen3 { values, vectors }
}

/// One Jacobi rotation annihilating `m[p][q]`.
fn rotate(m: &mut Matrix3<f64>, v: &mut Matrix3<f64>, p: usize, q: usize) {
    let apq = m[(p, q)];
    if apq == 0.0 {
        return;
    }
    let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
    let t = if theta == 0.0 { 1.0 } else { t };
    let c = 1.0 / (t * t + 1.0).sqrt();
    let s = t * c;
    let mut g = Matrix3::<f64>::identity();
    g[(p, p)] = c;
    g[(q, q)] = c;
    g[(p, q)] = s;
    g[(q, p)] = -s;
    *m = g.transpose() * *m * g;
    m[(p, q)] = 0.0;
    m[(q, p)] = 0.0;
    *v *= g;
}

/// Covariance of `points` about their mean (divided by the count).
pub fn covariance<'a, I>(points: I) -> (Vector3<f64>, Matrix3<f64>)
where
    I: IntoIterator<Item = &'a Vector3<f64>> + Clone,
{
    let mut mean = Vector3::zeros();
    let mut n = 0usize;
    for p in points.clone() {
        mean += p;
        n += 1;
    }
    mean /= n as f64;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - mean;
        cov += d * d.transpose();
    }
    (mean, cov / n as f64)
}
