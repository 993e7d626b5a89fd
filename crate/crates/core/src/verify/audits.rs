use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{audit_equivariance, audit_invariance, brute_force_oracles, toy_gradcheck, AuditReport, AuditSuite, Expect};
use crate::autodiff::{ParamStore, Tape, Tensor};
use crate::conv::{generate_kernel_points, kpconv_standard, multi_align_kpconv, KernelDisposition, LrfMlpWeights};
use crate::data::Preprocessing;
use crate::error::Result;
use crate::geometry::{apply_rotation, radius_neighbors, Point3, PointCloud, Rotation3};
use crate::layers::{normal_tensor, LrfUpdate};
use crate::lrf::{local_pca_lrf, multi_scale_lrf_init, LrfSet};
use crate::network::{Model, Variant};

/// Trial budget shared by the audits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AuditConfig {
    pub rotations: usize,
    pub inputs: usize,
    pub seed: u64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            rotations: 32,
            inputs: 20,
            seed: 0,
        }
    }
}

/// Relative tolerance of the end-to-end network audit.
pub const NETWORK_TOL: f64 = 1e-8;

const CONV_RADIUS: f64 = 0.6;
const CONV_SCALES: [usize; 2] = [8, 16];
const CONV_QUERIES: usize = 8;

/// Anisotropic Gaussian blob, generic enough for well-separated PCA
/// eigenvalues at every scale.
fn blob(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
    let axes = [0.5, 0.3, 0.15];
    let pts = (0..n)
        .map(|_| Point3::from_fn(|i, _| axes[i] * rng.sample::<f64, _>(rand_distr::StandardNormal)))
        .collect();
    PointCloud::from_points(pts).expect("finite points")
}

struct ConvInput {
    cloud: PointCloud,
    features: Tensor,
    mlp: LrfMlpWeights,
    weights: Tensor,
    standard: Vec<Tensor>,
}

fn random_mlp(rng: &mut ChaCha8Rng, j: usize, c: usize, std: f64) -> LrfMlpWeights {
    LrfMlpWeights {
        w1: normal_tensor(9 * j, 2 * c, std, rng),
        b1: normal_tensor(1, 2 * c, 0.1 * std, rng),
        w2: normal_tensor(2 * c, c, std, rng),
        b2: normal_tensor(1, c, 0.1 * std, rng),
    }
}

fn conv_input(rng: &mut ChaCha8Rng, k: usize) -> Result<Option<ConvInput>> {
    let n = rng.gen_range(40..=80);
    let cloud = blob(rng, n);
    if multi_scale_lrf_init(&cloud, &CONV_SCALES)?.degenerate_count() > 0 {
        return Ok(None);
    }
    let c = 3;
    let j = CONV_SCALES.len();
    let features = normal_tensor(n, c, 1.0, rng);
    Ok(Some(ConvInput {
        cloud,
        features,
        mlp: random_mlp(rng, j, c, 0.5),
        weights: normal_tensor(k * j * 2 * c, 4, 1.0, rng),
        standard: (0..k).map(|_| normal_tensor(c, 4, 1.0, rng)).collect(),
    }))
}

fn kernel() -> Result<KernelDisposition> {
    generate_kernel_points(15, 0.66 * CONV_RADIUS, 0)?.with_sigma(0.3 * CONV_RADIUS)
}

enum ConvMode {
    Aligned,
    IdentityFrames,
    Standard,
}

fn run_conv(input: &ConvInput, rot: &Rotation3, disp: &KernelDisposition, mode: ConvMode) -> Result<Tensor> {
    let moved = apply_rotation(rot, &input.cloud);
    let pts = moved.points();
    let frames = match mode {
        ConvMode::Aligned => multi_scale_lrf_init(&moved, &CONV_SCALES)?,
        _ => LrfSet::identity(pts.len(), CONV_SCALES.len()),
    };
    let nb = radius_neighbors(pts, &pts[..CONV_QUERIES], CONV_RADIUS)?;
    let mut out = Vec::new();
    for q in 0..CONV_QUERIES {
        let row = match mode {
            ConvMode::Standard => kpconv_standard(&pts[q], pts, nb.get(q), &input.features, disp, &input.standard)?,
            _ => multi_align_kpconv(
                &pts[q],
                frames.stack(q),
                pts,
                nb.get(q),
                &frames,
                &input.features,
                disp,
                &input.weights,
                Some(&input.mlp),
            )?,
        };
        out.extend(row);
    }
    Tensor::from_vec(CONV_QUERIES, out.len() / CONV_QUERIES, out)
}

/// Invariance of the multi-aligned convolution with PCA frames, with the
/// unaligned convolution and identity frames as negative controls and a
/// constant map as a sanity check.
pub fn conv_invariance_audits(cfg: &AuditConfig) -> Result<Vec<(AuditReport, Expect)>> {
    let disp = kernel()?;
    let k = disp.len();
    let mut out = Vec::new();
    let gen = |rng: &mut ChaCha8Rng| conv_input(rng, k);
    out.push((
        audit_invariance("multi_align_kpconv invariance", cfg.inputs, cfg.rotations, 1e-10, cfg.seed, gen, |i, r| {
            run_conv(i, r, &disp, ConvMode::Aligned)
        })?,
        Expect::Pass,
    ));
    out.push((
        audit_invariance("kpconv_standard invariance", cfg.inputs, cfg.rotations, 1e-3, cfg.seed, gen, |i, r| {
            run_conv(i, r, &disp, ConvMode::Standard)
        })?,
        Expect::Fail,
    ));
    out.push((
        audit_invariance("identity-frame conv invariance", cfg.inputs, cfg.rotations, 1e-3, cfg.seed, gen, |i, r| {
            run_conv(i, r, &disp, ConvMode::IdentityFrames)
        })?,
        Expect::Fail,
    ));
    out.push((
        audit_invariance("constant map invariance", cfg.inputs, cfg.rotations, 0.0, cfg.seed, gen, |_, _| {
            Ok(Tensor::filled(2, 2, 3.5))
        })?,
        Expect::Pass,
    ));
    Ok(out)
}

fn frame_columns(frames: &[nalgebra::Matrix3<f64>]) -> Vec<Point3> {
    frames
        .iter()
        .flat_map(|m| (0..3).map(move |c| m.column(c).into_owned()))
        .collect()
}

struct UpdateInput {
    cloud: PointCloud,
    features: Tensor,
    store: ParamStore,
    update: LrfUpdate,
}

/// Equivariance of the PCA frames and of the frame-update pipeline, plus
/// the identity map as a sanity check.
pub fn lrf_equivariance_audits(cfg: &AuditConfig) -> Result<Vec<(AuditReport, Expect)>> {
    let mut out = Vec::new();
    let gen_cloud = |rng: &mut ChaCha8Rng| -> Result<Option<PointCloud>> {
        let n = rng.gen_range(40..=120);
        let cloud = blob(rng, n);
        let frames = local_pca_lrf(&cloud, 16)?;
        Ok((!frames.iter().any(|f| f.degenerate)).then_some(cloud))
    };
    out.push((
        audit_equivariance("local_pca_lrf equivariance", cfg.inputs, cfg.rotations, 1e-9, cfg.seed, gen_cloud, |c, r| {
            let frames: Vec<_> = local_pca_lrf(&apply_rotation(r, c), 16)?
                .iter()
                .map(|f| *f.rotation.matrix())
                .collect();
            Ok(frame_columns(&frames))
        })?,
        Expect::Pass,
    ));
    let gen_update = |rng: &mut ChaCha8Rng| -> Result<Option<UpdateInput>> {
        let n = rng.gen_range(40..=120);
        let cloud = blob(rng, n);
        if multi_scale_lrf_init(&cloud, &CONV_SCALES)?.degenerate_count() > 0 {
            return Ok(None);
        }
        let mut store = ParamStore::new();
        let update = LrfUpdate::new(&mut store, "u", 6, CONV_SCALES.len(), 0.5, rng)?;
        store.get_mut(update.out.weight).value = normal_tensor(6, 9 * CONV_SCALES.len(), 0.3, rng);
        Ok(Some(UpdateInput {
            features: normal_tensor(n, 6, 1.0, rng),
            cloud,
            store,
            update,
        }))
    };
    out.push((
        audit_equivariance("lrf_update pipeline equivariance", cfg.inputs, cfg.rotations, 1e-9, cfg.seed, gen_update, |u, r| {
            let frames = multi_scale_lrf_init(&apply_rotation(r, &u.cloud), &CONV_SCALES)?;
            let mut tape = Tape::new();
            let f = tape.constant(u.features.clone());
            let fr = tape.constant(frames.to_tensor());
            let up = u.update.forward(&mut tape, &u.store, f, fr)?;
            Ok(frame_columns(LrfSet::from_tensor(tape.value(up.frames))?.frames()))
        })?,
        Expect::Pass,
    ));
    out.push((
        audit_equivariance(
            "identity map equivariance",
            cfg.inputs,
            cfg.rotations,
            0.0,
            cfg.seed,
            |rng| Ok(Some(Point3::from_fn(|_, _| rng.gen_range(-1.0..1.0)))),
            |p, r| Ok(vec![r.apply(p)]),
        )?,
        Expect::Pass,
    ));
    Ok(out)
}

/// With one identity frame per point and an LRF-feature MLP whose output is
/// zero, the multi-aligned convolution equals the plain one.
pub fn reduction_audit(cfg: &AuditConfig) -> Result<AuditReport> {
    use rand::SeedableRng;
    let disp = kernel()?;
    let k = disp.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut worst = 0.0f64;
    for _ in 0..cfg.inputs {
        let n = rng.gen_range(20..=60);
        let cloud = blob(&mut rng, n);
        let c = 3;
        let features = normal_tensor(n, c, 1.0, &mut rng);
        let standard: Vec<Tensor> = (0..k).map(|_| normal_tensor(c, 4, 1.0, &mut rng)).collect();
        // rows k·(2c) + i: the first c rows per kernel point act on the
        // features, the rest on the (zero) frame features
        let mut stacked = normal_tensor(k * 2 * c, 4, 1.0, &mut rng);
        for (kk, w) in standard.iter().enumerate() {
            for i in 0..c {
                stacked.row_mut(kk * 2 * c + i).copy_from_slice(w.row(i));
            }
        }
        let mut mlp = random_mlp(&mut rng, 1, c, 0.5);
        mlp.w2 = Tensor::zeros(2 * c, c);
        mlp.b2 = Tensor::zeros(1, c);
        let pts = cloud.points();
        let frames = LrfSet::identity(n, 1);
        let nb = radius_neighbors(pts, pts, CONV_RADIUS)?;
        for q in 0..n {
            let a = kpconv_standard(&pts[q], pts, nb.get(q), &features, &disp, &standard)?;
            let b = multi_align_kpconv(&pts[q], frames.stack(q), pts, nb.get(q), &frames, &features, &disp, &stacked, Some(&mlp))?;
            for (x, y) in a.iter().zip(&b) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    Ok(AuditReport::new("reduction to kpconv_standard", cfg.inputs, worst, 1e-12, 0))
}

/// Eval-mode logits of `model` under whole-cloud rotations of the raw
/// clouds, through `preprocessing` and the network. Clouds whose
/// subsampling fell back to an axis-aligned grid or whose initial frames
/// are degenerate are excluded.
pub fn audit_network_invariance(
    model: &Model,
    clouds: &[PointCloud],
    rotations: usize,
    tol: f64,
    preprocessing: &Preprocessing,
    seed: u64,
) -> Result<AuditReport> {
    let mut next = 0;
    let logits = |c: &PointCloud| -> Result<Tensor> {
        let p = model.prepare(&preprocessing.apply(c)?)?;
        Ok(model.predict(&crate::network::Batch::new(&[&p])?)?.logits)
    };
    let check = format!("network invariance ({})", model.spec.variant.name());
    audit_invariance(
        &check,
        clouds.len(),
        rotations,
        tol,
        seed,
        |_| {
            let c = &clouds[next];
            next += 1;
            let p = model.prepare(&preprocessing.apply(c)?)?;
            Ok((p.equivariant && p.degenerate_frames() == 0).then(|| c.clone()))
        },
        |c, r| logits(&apply_rotation(r, c)),
    )
}

/// A trained or fresh model with the raw clouds to audit it on.
#[derive(Clone, Copy, Debug)]
pub struct NetworkAudit<'a> {
    pub model: &'a Model,
    pub clouds: &'a [PointCloud],
    pub preprocessing: &'a Preprocessing,
    pub rotations: usize,
}

/// Every audit: convolution invariance with negative controls, frame
/// equivariance, the reduction property, the brute-force oracles, the toy
/// gradient check and, given a model, end-to-end invariance (expected to
/// fail for the `standard` variant).
pub fn run_suite(cfg: &AuditConfig, network: Option<NetworkAudit<'_>>) -> Result<AuditSuite> {
    let mut suite = AuditSuite::default();
    suite.extend(conv_invariance_audits(cfg)?);
    suite.extend(lrf_equivariance_audits(cfg)?);
    suite.push(reduction_audit(cfg)?, Expect::Pass);
    for r in brute_force_oracles(cfg.seed, 100)? {
        suite.push(r, Expect::Pass);
    }
    suite.push(toy_gradcheck(cfg.seed, usize::MAX)?.report, Expect::Pass);
    if let Some(n) = network {
        let r = audit_network_invariance(n.model, n.clouds, n.rotations, NETWORK_TOL, n.preprocessing, cfg.seed)?;
        let expect = if n.model.spec.variant == Variant::Standard {
            Expect::Fail
        } else {
            Expect::Pass
        };
        suite.push(r, expect);
    }
    Ok(suite)
}
