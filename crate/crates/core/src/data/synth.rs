use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{Dataset, RotationMode, Sample, Split};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud};

/// The eight synthetic shape classes, in label order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeClass {
    Sphere,
    Cube,
    Cylinder,
    Cone,
    Torus,
    LBracket,
    PlanePair,
    Helix,
}

pub const SHAPE_CLASSES: [ShapeClass; 8] = [
    ShapeClass::Sphere,
    ShapeClass::Cube,
    ShapeClass::Cylinder,
    ShapeClass::Cone,
    ShapeClass::Torus,
    ShapeClass::LBracket,
    ShapeClass::PlanePair,
    ShapeClass::Helix,
];

/// Parts per class; point labels are `class * PARTS_PER_CLASS + part`.
pub const PARTS_PER_CLASS: usize = 2;

impl ShapeClass {
    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Sphere => "sphere",
            ShapeClass::Cube => "cube",
            ShapeClass::Cylinder => "cylinder",
            ShapeClass::Cone => "cone",
            ShapeClass::Torus => "torus",
            ShapeClass::LBracket => "l-bracket",
            ShapeClass::PlanePair => "plane-pair",
            ShapeClass::Helix => "helix",
        }
    }

    pub fn index(self) -> usize {
        SHAPE_CLASSES.iter().position(|&c| c == self).expect("listed")
    }

    /// `n` surface samples of the canonical (unscaled, noise-free) shape
    /// with their part index.
    ///
    /// Parts: sphere and cube upper/lower half; cylinder side/caps; cone
    /// side/base; torus outer/inner half; L-bracket long/short plate; plane
    /// pair large/small plate; helix tube outer/inner side.
    pub fn sample<R: Rng + ?Sized>(self, n: usize, rng: &mut R) -> (Vec<Point3>, Vec<usize>) {
        (0..n).map(|_| self.sample_one(rng)).unzip()
    }

    fn sample_one<R: Rng + ?Sized>(self, rng: &mut R) -> (Point3, usize) {
        match self {
            ShapeClass::Sphere => {
                let g = Point3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
                let p = g.normalize();
                (p, usize::from(p.z < 0.0))
            }
            ShapeClass::Cube => {
                let a = 0.6;
                let face = rng.gen_range(0..6);
                let (u, v) = (rng.gen_range(-a..a), rng.gen_range(-a..a));
                let s = if face % 2 == 0 { a } else { -a };
                let p = match face / 2 {
                    0 => Point3::new(s, u, v),
                    1 => Point3::new(u, s, v),
                    _ => Point3::new(u, v, s),
                };
                (p, usize::from(p.z < 0.0))
            }
            ShapeClass::Cylinder => {
                let (r, h) = (0.5, 0.8);
                let side = TAU * r * 2.0 * h;
                let caps = 2.0 * PI * r * r;
                if rng.gen::<f64>() * (side + caps) < side {
                    let t = rng.gen_range(0.0..TAU);
                    (Point3::new(r * t.cos(), r * t.sin(), rng.gen_range(-h..h)), 0)
                } else {
                    let (x, y) = disk(rng, r);
                    let z = if rng.gen::<bool>() { h } else { -h };
                    (Point3::new(x, y, z), 1)
                }
            }
            ShapeClass::Cone => {
                let (r, h, base) = (0.7, 1.5, -0.5);
                let lateral = PI * r * (r * r + h * h).sqrt();
                let disk_area = PI * r * r;
                if rng.gen::<f64>() * (lateral + disk_area) < lateral {
                    let t = rng.gen::<f64>().sqrt();
                    let a = rng.gen_range(0.0..TAU);
                    (Point3::new(r * t * a.cos(), r * t * a.sin(), base + h * (1.0 - t)), 0)
                } else {
                    let (x, y) = disk(rng, r);
                    (Point3::new(x, y, base), 1)
                }
            }
            ShapeClass::Torus => {
                let (big, small) = (0.7, 0.25);
                let phi = loop {
                    let phi = rng.gen_range(0.0..TAU);
                    if rng.gen::<f64>() * (big + small) <= big + small * f64::cos(phi) {
                        break phi;
                    }
                };
                let theta = rng.gen_range(0.0..TAU);
                let rho = big + small * phi.cos();
                let p = Point3::new(rho * theta.cos(), rho * theta.sin(), small * phi.sin());
                (p, usize::from(phi.cos() < 0.0))
            }
            ShapeClass::LBracket => {
                let (long, short, width) = (1.2, 0.7, 0.6);
                let y = rng.gen_range(-width / 2.0..width / 2.0);
                let p = if rng.gen::<f64>() * (long + short) < long {
                    (Point3::new(rng.gen_range(0.0..long), y, 0.0), 0)
                } else {
                    (Point3::new(0.0, y, rng.gen_range(0.0..short)), 1)
                };
                (p.0 - Point3::new(0.4, 0.0, 0.2), p.1)
            }
            ShapeClass::PlanePair => {
                let (big, small, gap) = (0.6, 0.4, 0.35);
                if rng.gen::<f64>() * (big * big + small * small) < big * big {
                    (Point3::new(rng.gen_range(-big..big), rng.gen_range(-big..big), gap), 0)
                } else {
                    (Point3::new(rng.gen_range(-small..small), rng.gen_range(-small..small), -gap), 1)
                }
            }
            ShapeClass::Helix => {
                let (radius, half_height, turns, tube) = (0.5, 0.8, 3.0, 0.08);
                let t = rng.gen::<f64>();
                let theta = TAU * turns * t;
                let center = Point3::new(radius * theta.cos(), radius * theta.sin(), -half_height + 2.0 * half_height * t);
                let tangent = Point3::new(
                    -radius * theta.sin() * TAU * turns,
                    radius * theta.cos() * TAU * turns,
                    2.0 * half_height,
                )
                .normalize();
                let normal = Point3::new(theta.cos(), theta.sin(), 0.0);
                let binormal = tangent.cross(&normal);
                let psi = rng.gen_range(0.0..TAU);
                let p = center + tube * (psi.cos() * normal + psi.sin() * binormal);
                (p, usize::from(psi.cos() < 0.0))
            }
        }
    }
}

fn disk<R: Rng + ?Sized>(rng: &mut R, r: f64) -> (f64, f64) {
    let rho = r * rng.gen::<f64>().sqrt();
    let a = rng.gen_range(0.0..TAU);
    (rho * a.cos(), rho * a.sin())
}

/// Generator settings; see [`synth_shapes`] for the defaults.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub per_class: usize,
    pub points: usize,
    pub seed: u64,
    pub rotation: RotationMode,
    /// Jitter standard deviation relative to the instance extent.
    pub jitter_ratio: f64,
    /// Uniform scale factor range.
    pub scale: (f64, f64),
    pub split: Split,
}

impl SynthSpec {
    pub fn new(per_class: usize, points: usize, seed: u64) -> Self {
        Self {
            per_class,
            points,
            seed,
            rotation: RotationMode::None,
            jitter_ratio: 0.01,
            scale: (0.8, 1.2),
            split: Split::Train,
        }
    }

    pub fn generate(&self) -> Result<Dataset> {
        if self.per_class == 0 || self.points == 0 {
            return Err(Error::invalid("synthetic dataset needs at least one cloud and one point"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut samples = Vec::with_capacity(self.per_class * SHAPE_CLASSES.len());
        for _ in 0..self.per_class {
            for class in SHAPE_CLASSES {
                samples.push(self.instance(class, &mut rng)?);
            }
        }
        Ok(Dataset {
            samples,
            split: self.split,
            preprocessing: None,
            class_count: SHAPE_CLASSES.len(),
        })
    }

    fn instance(&self, class: ShapeClass, rng: &mut ChaCha8Rng) -> Result<Sample> {
        let (mut points, parts) = class.sample(self.points, rng);
        let s = if self.scale.0 < self.scale.1 {
            rng.gen_range(self.scale.0..=self.scale.1)
        } else {
            self.scale.0
        };
        let rot = self.rotation.sample(rng);
        for p in &mut points {
            *p = rot.apply(&(*p * s));
        }
        if self.jitter_ratio > 0.0 {
            let c = crate::geometry::centroid(&points);
            let extent = 2.0 * points.iter().map(|p| (p - c).norm()).fold(0.0, f64::max);
            let noise = Normal::new(0.0, self.jitter_ratio * extent).map_err(|e| Error::invalid(e.to_string()))?;
            for p in &mut points {
                *p += Point3::from_fn(|_, _| noise.sample(rng));
            }
        }
        let labels = parts.iter().map(|&p| class.index() * PARTS_PER_CLASS + p).collect();
        let n = points.len();
        Ok(Sample {
            cloud: PointCloud::new(points, Tensor::filled(n, 1, 1.0), Some(labels))?,
            class: class.index(),
        })
    }
}

/// `n_per_class` instances of each of the eight classes with
/// `points_per_shape` points: scaled by a factor in [0.8, 1.2] and jittered
/// with σ = 1% of the instance extent. Clouds carry part labels.
pub fn synth_shapes(n_per_class: usize, points_per_shape: usize, seed: u64) -> Result<Dataset> {
    SynthSpec::new(n_per_class, points_per_shape, seed).generate()
}
