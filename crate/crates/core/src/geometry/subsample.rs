use std::collections::BTreeMap;

use nalgebra::Matrix3;

use super::cloud::{centroid, Point3, PointCloud};
use super::neighbors::{knn, NEAREST_TIE_TOL};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::lrf::global_pca_frame;

/// Output of [`grid_subsample_equivariant`].
#[derive(Clone, Debug)]
pub struct Subsampled {
    pub cloud: PointCloud,
    /// Per output point, the index of its nearest input point.
    pub carry: Vec<usize>,
    /// False when the global PCA frame was ambiguous and an axis-aligned
    /// grid was used instead.
    pub equivariant: bool,
}

/// Grid subsampling in the cloud's own PCA frame, anchored at the centroid,
/// so that the map commutes with rotations and translations.
pub fn grid_subsample_equivariant(input: &PointCloud, cell: f64) -> Result<Subsampled> {
    if !(cell > 0.0) || !cell.is_finite() {
        return Err(Error::invalid(format!("cell size must be positive, got {cell}")));
    }
    let pts = input.points();
    let frame = global_pca_frame(pts);
    // the fallback is the plain world grid, anchored at the origin
    let (basis, center, equivariant) = if frame.degenerate {
        (Matrix3::identity(), Point3::zeros(), false)
    } else {
        (*frame.rotation.matrix(), centroid(pts), true)
    };
    let bt = basis.transpose();
    let inv = 1.0 / cell;

    let mut cells: BTreeMap<(i64, i64, i64), Vec<usize>> = BTreeMap::new();
    for (i, p) in pts.iter().enumerate() {
        let local = bt * (p - center);
        let key = (
            (local.x * inv).floor() as i64,
            (local.y * inv).floor() as i64,
            (local.z * inv).floor() as i64,
        );
        cells.entry(key).or_default().push(i);
    }

    let d = input.features().cols();
    let mut points = Vec::with_capacity(cells.len());
    let mut features = Tensor::zeros(cells.len(), d);
    let mut labels = input.labels().map(|_| Vec::with_capacity(cells.len()));
    for (row, members) in cells.values().enumerate() {
        let m = members.len() as f64;
        let mut bary = Point3::zeros();
        for &i in members {
            bary += pts[i];
        }
        points.push(bary / m);
        let out = features.row_mut(row);
        for &i in members {
            for (o, v) in out.iter_mut().zip(input.features().row(i)) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o /= m;
        }
        if let (Some(out), Some(src)) = (labels.as_mut(), input.labels()) {
            out.push(majority(members.iter().map(|&i| src[i])));
        }
    }
    let carry = carry_indices(pts, &points, &bt, &center)?;
    let cloud = PointCloud::new(points, features, labels)?;
    Ok(Subsampled {
        cloud,
        carry,
        equivariant,
    })
}

/// Nearest input point of each output point. Near-ties (common: a two-point
/// cell puts its barycenter halfway between them) are broken by comparing
/// the candidates' coordinates in the subsampling basis, which depends on
/// neither the input order nor the cloud's orientation.
fn carry_indices(pts: &[Point3], outputs: &[Point3], bt: &Matrix3<f64>, center: &Point3) -> Result<Vec<usize>> {
    let nb = knn(pts, outputs, pts.len().min(8))?;
    let local = |i: usize| bt * (pts[i] - center);
    Ok(nb
        .iter()
        .zip(outputs)
        .map(|(list, q)| {
            let d0 = (pts[list[0]] - q).norm_squared();
            let limit = d0 * (1.0 + NEAREST_TIE_TOL);
            let mut best = list[0];
            for &i in list.iter().skip(1).take_while(|&&i| (pts[i] - q).norm_squared() <= limit) {
                if i != best && basis_order(&local(i), &local(best)).is_lt() {
                    best = i;
                }
            }
            best
        })
        .collect())
}

/// Lexicographic order with a small tolerance per coordinate.
fn basis_order(a: &Point3, b: &Point3) -> std::cmp::Ordering {
    for k in 0..3 {
        if (a[k] - b[k]).abs() > 1e-9 * (1.0 + a[k].abs().max(b[k].abs())) {
            return a[k].total_cmp(&b[k]);
        }
    }
    std::cmp::Ordering::Equal
}

/// Most frequent label; ties go to the smallest.
fn majority(labels: impl Iterator<Item = usize>) -> usize {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for l in labels {
        *counts.entry(l).or_default() += 1;
    }
    let mut best = (0, 0);
    for (l, c) in counts {
        if c > best.1 {
            best = (l, c);
        }
    }
    best.0
}
