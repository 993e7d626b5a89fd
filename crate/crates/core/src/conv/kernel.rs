use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Influence width as a fraction of the convolution radius.
pub const DEFAULT_SIGMA_RATIO: f64 = 0.3;
/// Number of kernel points.
pub const DEFAULT_KERNEL_COUNT: usize = 15;

const OPTIMIZER_STEPS: usize = 10_000;
const CACHE_HEADER: &str = "alignconv-kernel-points v1";

/// Kernel points `x̃_k` inside a ball, with the influence width `σ`.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelDisposition {
    points: Vec<[f64; 3]>,
    radius: f64,
    sigma: f64,
}

impl KernelDisposition {
    pub fn new(points: Vec<[f64; 3]>, radius: f64, sigma: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("kernel disposition needs at least one point"));
        }
        if !(radius > 0.0) || !(sigma > 0.0) {
            return Err(Error::invalid(format!(
                "kernel radius ({radius}) and sigma ({sigma}) must be positive"
            )));
        }
        if let Some(p) = points.iter().find(|p| norm(p) > radius * (1.0 + 1e-12)) {
            return Err(Error::invalid(format!("kernel point {p:?} lies outside radius {radius}")));
        }
        Ok(Self { points, radius, sigma })
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn with_sigma(mut self, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
        }
        self.sigma = sigma;
        Ok(self)
    }

    /// Smallest distance between two kernel points (infinite for `K = 1`).
    pub fn min_pairwise_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for (i, a) in self.points.iter().enumerate() {
            for b in &self.points[i + 1..] {
                best = best.min(norm(&[a[0] - b[0], a[1] - b[1], a[2] - b[2]]));
            }
        }
        best
    }
}

fn norm(p: &[f64; 3]) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

/// Deterministic disposition of `k` points in the ball of radius `r`: one at
/// the origin, the others spread by minimizing `Σ 1/d` with projected
/// gradient steps onto the ball. `σ` defaults to `0.3·r`.
pub fn generate_kernel_points(k: usize, r: f64, seed: u64) -> Result<KernelDisposition> {
    if k == 0 {
        return Err(Error::invalid("kernel point count must be at least 1"));
    }
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::invalid(format!("kernel radius must be positive, got {r}")));
    }
    let unit = optimize_unit_disposition(k, seed);
    let points = unit.iter().map(|p| [p[0] * r, p[1] * r, p[2] * r]).collect();
    KernelDisposition::new(points, r, DEFAULT_SIGMA_RATIO * r)
}

fn optimize_unit_disposition(k: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut pts = vec![[0.0; 3]];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while pts.len() < k {
        let p = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let n = norm(&p);
        if n <= 1.0 && n > 0.1 {
            pts.push(p);
        }
    }
    let mut grads = vec![[0.0; 3]; k];
    for step in 0..OPTIMIZER_STEPS {
        let eta = 0.05 * (1.0 - step as f64 / OPTIMIZER_STEPS as f64) + 1e-4;
        for i in 1..k {
            let mut g = [0.0; 3];
            for (j, q) in pts.iter().enumerate() {
                if i == j {
                    continue;
                }
                let d = [pts[i][0] - q[0], pts[i][1] - q[1], pts[i][2] - q[2]];
                let n = norm(&d).max(1e-9);
                let w = 1.0 / (n * n * n);
                for c in 0..3 {
                    g[c] += d[c] * w;
                }
            }
            grads[i] = g;
        }
        for i in 1..k {
            let g = grads[i];
            let gn = norm(&g);
            if gn == 0.0 {
                continue;
            }
            let p = &mut pts[i];
            for c in 0..3 {
                p[c] += eta * g[c] / gn;
            }
            let n = norm(p);
            if n > 1.0 {
                for v in p.iter_mut() {
                    *v /= n;
                }
            }
        }
    }
    pts
}

fn cache_path(dir: &Path, k: usize, r: f64, seed: u64) -> PathBuf {
    dir.join(format!("kernel_k{k}_r{:016x}_s{seed}.txt", r.to_bits()))
}

/// Loads a cached disposition for `(k, r, seed)` from `dir`, generating and
/// writing it on a miss. Stale or mismatching cache files are regenerated.
pub fn load_or_generate_kernel_points(
    dir: &Path,
    k: usize,
    r: f64,
    seed: u64,
) -> Result<KernelDisposition> {
    let path = cache_path(dir, k, r, seed);
    if let Ok(text) = fs::read_to_string(&path) {
        if let Ok(d) = parse_cache(&text, k, r, seed) {
            return Ok(d);
        }
    }
    let d = generate_kernel_points(k, r, seed)?;
    fs::create_dir_all(dir)?;
    fs::write(&path, render_cache(&d, seed))?;
    Ok(d)
}

fn render_cache(d: &KernelDisposition, seed: u64) -> String {
    let mut s = format!("{CACHE_HEADER}\n{} {:?} {seed}\n", d.len(), d.radius);
    for p in &d.points {
        s.push_str(&format!("{:?} {:?} {:?}\n", p[0], p[1], p[2]));
    }
    s
}

fn parse_cache(text: &str, k: usize, r: f64, seed: u64) -> Result<KernelDisposition> {
    let bad = || Error::invalid("malformed kernel cache");
    let mut lines = text.lines();
    if lines.next() != Some(CACHE_HEADER) {
        return Err(bad());
    }
    let head: Vec<&str> = lines.next().ok_or_else(bad)?.split_whitespace().collect();
    let matches = head.len() == 3
        && head[0].parse::<usize>().ok() == Some(k)
        && head[1].parse::<f64>().ok().map(f64::to_bits) == Some(r.to_bits())
        && head[2].parse::<u64>().ok() == Some(seed);
    if !matches {
        return Err(bad());
    }
    let mut points = Vec::with_capacity(k);
    for line in lines.take(k) {
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        if v.len() != 3 {
            return Err(bad());
        }
        points.push([v[0], v[1], v[2]]);
    }
    if points.len() != k {
        return Err(bad());
    }
    KernelDisposition::new(points, r, DEFAULT_SIGMA_RATIO * r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_point_sits_at_origin() {
        let d = generate_kernel_points(1, 1.0, 0).unwrap();
        assert_eq!(d.points(), &[[0.0; 3]]);
        assert_eq!(d.min_pairwise_distance(), f64::INFINITY);
    }

    #[test]
    fn fifteen_points_spread_inside_unit_ball() {
        let d = generate_kernel_points(15, 1.0, 42).unwrap();
        assert_eq!(d.len(), 15);
        assert_eq!(d.points()[0], [0.0; 3]);
        assert!(d.points().iter().all(|p| norm(p) <= 1.0));
        let m = d.min_pairwise_distance();
        assert!(m > 0.3, "min distance {m}");
        assert!((d.sigma() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn generation_is_deterministic_and_scales() {
        let a = generate_kernel_points(15, 1.0, 7).unwrap();
        let b = generate_kernel_points(15, 1.0, 7).unwrap();
        assert_eq!(a, b);
        let c = generate_kernel_points(15, 2.0, 7).unwrap();
        for (p, q) in a.points().iter().zip(c.points()) {
            for i in 0..3 {
                assert_eq!(2.0 * p[i], q[i]);
            }
        }
    }

    #[test]
    fn cache_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let a = load_or_generate_kernel_points(dir.path(), 15, 0.375, 3).unwrap();
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
        let b = load_or_generate_kernel_points(dir.path(), 15, 0.375, 3).unwrap();
        assert_eq!(a, b);
        let path = cache_path(dir.path(), 15, 0.375, 3);
        fs::write(&path, "garbage").unwrap();
        let c = load_or_generate_kernel_points(dir.path(), 15, 0.375, 3).unwrap();
        assert_eq!(a, c);
    }
}
