use std::sync::Arc;

use rand::Rng;

use super::{KernelDisposition, LrfMlpWeights};
use crate::autodiff::{ParamId, ParamStore, Segments, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{NeighborIndex, Point3};
use crate::layers::{normal_tensor, Linear};

/// Flattened (query, neighbor) pairs of one or more neighborhoods, with the
/// world-frame offsets `x_i − x` of every pair.
#[derive(Clone, Debug)]
pub struct PairGeometry {
    pub support_idx: Arc<[usize]>,
    pub query_idx: Arc<[usize]>,
    pub segments: Arc<Segments>,
    pub offsets: Arc<Tensor>,
    pub support_count: usize,
}

impl PairGeometry {
    pub fn new(support: &[Point3], queries: &[Point3], nb: &NeighborIndex) -> Result<Self> {
        if nb.len() != queries.len() {
            return Err(Error::invalid(format!(
                "{} neighbor lists for {} queries",
                nb.len(),
                queries.len()
            )));
        }
        let total = nb.total();
        let mut support_idx = Vec::with_capacity(total);
        let mut query_idx = Vec::with_capacity(total);
        let mut offsets = Tensor::zeros(total, 3);
        for (q, list) in nb.iter().enumerate() {
            for &i in list {
                if i >= support.len() {
                    return Err(Error::invalid(format!("neighbor index {i} >= {}", support.len())));
                }
                let d = support[i] - queries[q];
                offsets.row_mut(support_idx.len()).copy_from_slice(d.as_slice());
                support_idx.push(i);
                query_idx.push(q);
            }
        }
        Ok(Self {
            support_idx: support_idx.into(),
            query_idx: query_idx.into(),
            segments: Arc::new(Segments::from_lengths(nb.iter().map(<[usize]>::len))),
            offsets: Arc::new(offsets),
            support_count: support.len(),
        })
    }

    pub fn query_count(&self) -> usize {
        self.segments.len()
    }

    pub fn pair_count(&self) -> usize {
        self.support_idx.len()
    }

    /// Stacks several geometries into one, shifting support and query indices.
    pub fn concat(parts: &[&PairGeometry]) -> Self {
        let total: usize = parts.iter().map(|p| p.pair_count()).sum();
        let mut support_idx = Vec::with_capacity(total);
        let mut query_idx = Vec::with_capacity(total);
        let mut offsets = Vec::with_capacity(3 * total);
        let mut lengths = Vec::new();
        let (mut s_off, mut q_off) = (0, 0);
        for p in parts {
            support_idx.extend(p.support_idx.iter().map(|i| i + s_off));
            query_idx.extend(p.query_idx.iter().map(|i| i + q_off));
            offsets.extend_from_slice(p.offsets.data());
            lengths.extend((0..p.query_count()).map(|q| p.segments.range(q).len()));
            s_off += p.support_count;
            q_off += p.query_count();
        }
        Self {
            support_idx: support_idx.into(),
            query_idx: query_idx.into(),
            segments: Arc::new(Segments::from_lengths(lengths)),
            offsets: Arc::new(Tensor::from_vec(total, 3, offsets).expect("offset rows are 3 wide")),
            support_count: s_off,
        }
    }
}

/// Shared MLP turning realigned neighbor frames (9J values) into features.
#[derive(Clone, Debug)]
pub struct LrfMlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl LrfMlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        frame_count: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), 9 * frame_count, 2 * width, true, rng)?,
            out: Linear::new(store, &format!("{name}.out"), 2 * width, width, true, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, store, x)?;
        let h = tape.relu(h);
        self.out.forward(tape, store, h)
    }

    pub fn weights(&self, store: &ParamStore) -> LrfMlpWeights {
        let bias = |l: &Linear| store.value(l.bias.expect("mlp layers carry a bias")).clone();
        LrfMlpWeights {
            w1: store.value(self.hidden.weight).clone(),
            b1: bias(&self.hidden),
            w2: store.value(self.out.weight).clone(),
            b2: bias(&self.out),
        }
    }
}

/// Differentiable multi-alignment kernel point convolution over a batch of
/// neighborhoods.
#[derive(Clone, Debug)]
pub struct AlignedConv {
    pub disposition: KernelDisposition,
    kernel: Arc<[[f64; 3]]>,
    pub frame_count: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: ParamId,
    pub mlp: Option<LrfMlp>,
}

impl AlignedConv {
    /// `merge` appends the encoded neighbor frames to the input features.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        disposition: KernelDisposition,
        frame_count: usize,
        in_dim: usize,
        out_dim: usize,
        merge: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if frame_count == 0 || in_dim == 0 || out_dim == 0 {
            return Err(Error::Config(format!(
                "{name}: frame count ({frame_count}) and widths ({in_dim} -> {out_dim}) must be positive"
            )));
        }
        let mlp = if merge {
            Some(LrfMlp::new(store, &format!("{name}.lrf_mlp"), frame_count, in_dim, rng)?)
        } else {
            None
        };
        let cp = if merge { 2 * in_dim } else { in_dim };
        let rows = disposition.len() * frame_count * cp;
        let w = normal_tensor(rows, out_dim, (2.0 / rows as f64).sqrt(), rng);
        let weight = store.add(format!("{name}.kernel"), w)?;
        Ok(Self {
            kernel: disposition.points().to_vec().into(),
            disposition,
            frame_count,
            in_dim,
            out_dim,
            weight,
            mlp,
        })
    }

    /// Feature width `C'` seen by the kernel for each alignment.
    pub fn feature_width(&self) -> usize {
        if self.mlp.is_some() {
            2 * self.in_dim
        } else {
            self.in_dim
        }
    }

    /// `features`: support rows × in_dim; `support_frames`: support rows ×
    /// 9J; `query_frames`: query rows × 9J. Returns query rows × out_dim.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        features: Var,
        support_frames: Var,
        query_frames: Var,
        geom: &PairGeometry,
    ) -> Result<Var> {
        let nine_j = 9 * self.frame_count;
        if tape.shape(support_frames).1 != nine_j || tape.shape(query_frames).1 != nine_j {
            return Err(Error::Shape {
                op: "aligned_conv frames",
                left: tape.shape(support_frames),
                right: tape.shape(query_frames),
            });
        }
        if tape.shape(query_frames).0 != geom.query_count() {
            return Err(Error::Shape {
                op: "aligned_conv queries",
                left: tape.shape(query_frames),
                right: (geom.query_count(), nine_j),
            });
        }
        let qf = tape.gather_rows(query_frames, geom.query_idx.clone())?;
        let y = tape.frame_transpose_apply(qf, geom.offsets.clone())?;
        let h = tape.kernel_influence(y, self.kernel.clone(), self.disposition.sigma())?;
        let mut f = tape.gather_rows(features, geom.support_idx.clone())?;
        if let Some(mlp) = &self.mlp {
            let sf = tape.gather_rows(support_frames, geom.support_idx.clone())?;
            let rel = tape.relative_frames(qf, sf)?;
            let enc = mlp.forward(tape, store, rel)?;
            f = tape.concat_cols(&[f, enc])?;
        }
        let agg = tape.kernel_aggregate(h, f, geom.segments.clone(), self.kernel.len())?;
        let w = tape.param(store, self.weight);
        tape.matmul(agg, w)
    }

    pub fn kernel_weights<'a>(&self, store: &'a ParamStore) -> &'a Tensor {
        store.value(self.weight)
    }

    pub fn mlp_weights(&self, store: &ParamStore) -> Option<LrfMlpWeights> {
        self.mlp.as_ref().map(|m| m.weights(store))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::conv::{generate_kernel_points, multi_align_kpconv};
    use crate::geometry::{radius_neighbors, sample_uniform_rotation};
    use crate::lrf::LrfSet;

    #[test]
    fn batched_layer_matches_single_query_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 40;
        let pts: Vec<Point3> = (0..n)
            .map(|_| Point3::from_fn(|_, _| rng.gen_range(-0.5..0.5)))
            .collect();
        let queries = pts[..10].to_vec();
        let nb = radius_neighbors(&pts, &queries, 0.45).unwrap();
        let frames = LrfSet::new(
            2,
            (0..2 * n).map(|_| *sample_uniform_rotation(&mut rng).matrix()).collect(),
            vec![false; 2 * n],
        )
        .unwrap();
        let feats = normal_tensor(n, 3, 1.0, &mut rng);
        let disp = generate_kernel_points(15, 0.3, 0).unwrap().with_sigma(0.14).unwrap();
        let mut store = ParamStore::new();
        let conv = AlignedConv::new(&mut store, "c", disp.clone(), 2, 3, 4, true, &mut rng).unwrap();
        let geom = PairGeometry::new(&pts, &queries, &nb).unwrap();

        let mut tape = Tape::new();
        let f = tape.constant(feats.clone());
        let ft = frames.to_tensor();
        let sf = tape.constant(ft.clone());
        let mut qt = Tensor::zeros(10, 18);
        for q in 0..10 {
            qt.row_mut(q).copy_from_slice(ft.row(q));
        }
        let qf = tape.constant(qt);
        let out = conv.forward(&mut tape, &store, f, sf, qf, &geom).unwrap();
        let mlp = conv.mlp_weights(&store).unwrap();
        for q in 0..10 {
            let reference = multi_align_kpconv(
                &queries[q],
                frames.stack(q),
                &pts,
                nb.get(q),
                &frames,
                &feats,
                &disp,
                conv.kernel_weights(&store),
                Some(&mlp),
            )
            .unwrap();
            for (a, b) in tape.value(out).row(q).iter().zip(&reference) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn concat_shifts_indices() {
        let pts = vec![Point3::zeros(), Point3::x()];
        let nb = radius_neighbors(&pts, &pts, 1.5).unwrap();
        let g = PairGeometry::new(&pts, &pts, &nb).unwrap();
        let both = PairGeometry::concat(&[&g, &g]);
        assert_eq!(&*both.support_idx, &[0, 1, 0, 1, 2, 3, 2, 3]);
        assert_eq!(&*both.query_idx, &[0, 0, 1, 1, 2, 2, 3, 3]);
        assert_eq!(both.query_count(), 4);
        assert_eq!(both.support_count, 4);
        assert_eq!(both.offsets.row(5), &[1.0, 0.0, 0.0]);
    }
}
