//! Exact radius and k-nearest-neighbor queries over a uniform hash grid.

use std::collections::HashMap;

use super::cloud::Point3;
use crate::error::{Error, Result};

/// Per-query ordered lists of input-point indices.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NeighborIndex {
    lists: Vec<Vec<usize>>,
}

impl NeighborIndex {
    pub fn from_lists(lists: Vec<Vec<usize>>) -> Self {
        Self { lists }
    }

    pub fn len(&self) -> usize {
        self.lists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }

    pub fn get(&self, q: usize) -> &[usize] {
        &self.lists[q]
    }

    pub fn lists(&self) -> &[Vec<usize>] {
        &self.lists
    }

    pub fn total(&self) -> usize {
        self.lists.iter().map(Vec::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &[usize]> {
        self.lists.iter().map(Vec::as_slice)
    }
}

type CellKey = (i64, i64, i64);

#[inline]
fn cell_of(p: &Point3, inv: f64) -> CellKey {
    (
        (p.x * inv).floor() as i64,
        (p.y * inv).floor() as i64,
        (p.z * inv).floor() as i64,
    )
}

/// Uniform spatial hash: cell → point indices in ascending order.
struct HashGrid {
    inv_cell: f64,
    cells: HashMap<CellKey, Vec<usize>>,
}

impl HashGrid {
    fn new(points: &[Point3], cell: f64) -> Self {
        let inv_cell = 1.0 / cell;
        let mut cells: HashMap<CellKey, Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(cell_of(p, inv_cell)).or_default().push(i);
        }
        Self { inv_cell, cells }
    }
}

/// All input indices `i` with `‖input_i − q‖ ≤ r`, ascending, for every query.
pub fn radius_neighbors(input: &[Point3], queries: &[Point3], r: f64) -> Result<NeighborIndex> {
    radius_neighbors_capped(input, queries, r, None)
}

/// Like [`radius_neighbors`], but keeps at most `cap` indices per query: the
/// nearest ones (ties by lower index), then re-sorted ascending.
pub fn radius_neighbors_capped(
    input: &[Point3],
    queries: &[Point3],
    r: f64,
    cap: Option<usize>,
) -> Result<NeighborIndex> {
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::invalid(format!("radius must be positive, got {r}")));
    }
    let grid = HashGrid::new(input, r);
    let r2 = r * r;
    let mut lists = Vec::with_capacity(queries.len());
    let mut found: Vec<(f64, usize)> = Vec::new();
    for q in queries {
        found.clear();
        let (cx, cy, cz) = cell_of(q, grid.inv_cell);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(members) = grid.cells.get(&(cx + dx, cy + dy, cz + dz)) {
                        for &i in members {
                            let d2 = (input[i] - q).norm_squared();
                            if d2 <= r2 {
                                found.push((d2, i));
                            }
                        }
                    }
                }
            }
        }
        if let Some(cap) = cap {
            if found.len() > cap {
                found.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                found.truncate(cap);
            }
        }
        let mut idx: Vec<usize> = found.iter().map(|&(_, i)| i).collect();
        idx.sort_unstable();
        lists.push(idx);
    }
    Ok(NeighborIndex { lists })
}

/// The `k` nearest input points of each query in nondecreasing distance order
/// (ties by lower index). When `k` exceeds the input size the list is padded
/// by repeating the farthest index.
pub fn knn(input: &[Point3], queries: &[Point3], k: usize) -> Result<NeighborIndex> {
    if k == 0 {
        return Err(Error::invalid("knn: k must be at least 1"));
    }
    if input.is_empty() {
        return Err(Error::invalid("knn: empty input"));
    }
    let (lo, hi) = bounds(input);
    let extent = hi - lo;
    let n = input.len() as f64;
    // about two points per cell for volumetric data, clamped for flat inputs
    let vol = extent.x.max(1e-9) * extent.y.max(1e-9) * extent.z.max(1e-9);
    let mut cell = (2.0 * vol / n).cbrt();
    let max_extent = extent.max().max(1e-12);
    cell = cell.clamp(max_extent / 256.0, max_extent);
    let dims = [
        (extent.x / cell).floor() as usize + 1,
        (extent.y / cell).floor() as usize + 1,
        (extent.z / cell).floor() as usize + 1,
    ];
    let mut cells: Vec<Vec<usize>> = vec![Vec::new(); dims[0] * dims[1] * dims[2]];
    let coord = |p: &Point3| -> [i64; 3] {
        let c = (p - lo) / cell;
        [
            (c.x.floor() as i64).clamp(0, dims[0] as i64 - 1),
            (c.y.floor() as i64).clamp(0, dims[1] as i64 - 1),
            (c.z.floor() as i64).clamp(0, dims[2] as i64 - 1),
        ]
    };
    let flat = |c: [i64; 3]| (c[0] as usize * dims[1] + c[1] as usize) * dims[2] + c[2] as usize;
    for (i, p) in input.iter().enumerate() {
        cells[flat(coord(p))].push(i);
    }
    let max_shell = *dims.iter().max().unwrap() as i64;

    let mut lists = Vec::with_capacity(queries.len());
    let mut cand: Vec<(f64, usize)> = Vec::new();
    for q in queries {
        cand.clear();
        // query cell, unclamped so that far-away queries still terminate
        let qc = (q - lo) / cell;
        let far = 1i64 << 40;
        let qc = [qc.x, qc.y, qc.z].map(|v| (v.floor() as i64).clamp(-far, far));
        let dist_to_grid = distance_outside(qc, dims);
        let mut visited = 0usize;
        // shells nearer than the grid are empty
        let mut shell = dist_to_grid;
        loop {
            for_each_shell_cell(qc, shell, dims, |c| {
                for &i in &cells[flat(c)] {
                    cand.push(((input[i] - q).norm_squared(), i));
                    visited += 1;
                }
            });
            if visited == input.len() {
                break;
            }
            if cand.len() >= k {
                // every unvisited point is at least `shell · cell` away
                let bound = shell as f64 * cell;
                let kth = kth_smallest(&mut cand, k);
                if kth < bound * bound {
                    break;
                }
            }
            shell += 1;
            if shell > max_shell + dist_to_grid {
                break;
            }
        }
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut idx: Vec<usize> = cand.iter().take(k).map(|&(_, i)| i).collect();
        let last = *idx.last().unwrap();
        idx.resize(k, last);
        lists.push(idx);
    }
    Ok(NeighborIndex { lists })
}

fn kth_smallest(cand: &mut [(f64, usize)], k: usize) -> f64 {
    let (_, kth, _) =
        cand.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    kth.0
}

fn distance_outside(c: [i64; 3], dims: [usize; 3]) -> i64 {
    (0..3)
        .map(|a| {
            if c[a] < 0 {
                -c[a]
            } else if c[a] >= dims[a] as i64 {
                c[a] - dims[a] as i64 + 1
            } else {
                0
            }
        })
        .max()
        .unwrap()
}

/// Visits in-grid cells at Chebyshev distance exactly `s` from `c`.
fn for_each_shell_cell(c: [i64; 3], s: i64, dims: [usize; 3], mut f: impl FnMut([i64; 3])) {
    let inside = |v: i64, a: usize| v >= 0 && v < dims[a] as i64;
    let span = |a: usize| (c[a] - s).max(0)..=(c[a] + s).min(dims[a] as i64 - 1);
    for x in span(0) {
        let x_edge = (x - c[0]).abs() == s;
        for y in span(1) {
            let xy_edge = x_edge || (y - c[1]).abs() == s;
            if xy_edge {
                for z in span(2) {
                    f([x, y, z]);
                }
            } else {
                for z in [c[2] - s, c[2] + s] {
                    if inside(z, 2) {
                        f([x, y, z]);
                    }
                    if s == 0 {
                        break;
                    }
                }
            }
        }
    }
}

fn bounds(points: &[Point3]) -> (Point3, Point3) {
    let mut lo = points[0];
    let mut hi = points[0];
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (lo, hi)
}

/// Relative tolerance on squared distances under which [`nearest`] treats
/// candidates as tied.
pub const NEAREST_TIE_TOL: f64 = 1e-9;

/// Index of the nearest input point for each query. Candidates whose squared
/// distance is within a relative [`NEAREST_TIE_TOL`] of the minimum count as
/// tied and the lowest index wins, so exact ties (a barycenter halfway
/// between two points) resolve the same way after rounding.
pub fn nearest(input: &[Point3], queries: &[Point3]) -> Result<Vec<usize>> {
    let k = input.len().min(8);
    let nb = knn(input, queries, k)?;
    Ok(nb
        .lists
        .iter()
        .zip(queries)
        .map(|(list, q)| {
            let d0 = (input[list[0]] - q).norm_squared();
            let limit = d0 * (1.0 + NEAREST_TIE_TOL);
            list.iter()
                .copied()
                .take_while(|&i| (input[i] - q).norm_squared() <= limit)
                .min()
                .unwrap_or(list[0])
        })
        .collect())
}
