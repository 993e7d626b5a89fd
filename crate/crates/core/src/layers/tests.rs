use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::conv::generate_kernel_points;
use crate::geometry::{radius_neighbors, sample_uniform_rotation, Rotation3};
use crate::lrf::LrfSet;

fn frames_tensor(rng: &mut ChaCha8Rng, n: usize, j: usize) -> LrfSet {
    LrfSet::new(
        j,
        (0..n * j).map(|_| *sample_uniform_rotation(rng).matrix()).collect(),
        vec![false; n * j],
    )
    .unwrap()
}

#[test]
fn identity_update_keeps_frames_and_costs_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let up = LrfUpdate::new(&mut store, "u", 5, 2, 0.5, &mut rng).unwrap();
    let frames = frames_tensor(&mut rng, 7, 2).to_tensor();
    let mut tape = Tape::new();
    let f = tape.constant(normal_tensor(7, 5, 1.0, &mut rng));
    let r = tape.constant(frames.clone());
    let out = up.forward(&mut tape, &store, f, r).unwrap();
    assert_eq!(tape.value(out.ortho).item(), 0.0);
    for (a, b) in tape.value(out.frames).data().iter().zip(frames.data()) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn doubled_identity_costs_thirteen_and_a_half() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let up = LrfUpdate::new(&mut store, "u", 3, 1, 0.5, &mut rng).unwrap();
    store.get_mut(up.out.bias.unwrap()).value.scale_in_place(2.0);
    let mut tape = Tape::new();
    let f = tape.constant(Tensor::filled(1, 3, 1.0));
    let r = tape.constant(LrfSet::identity(1, 1).to_tensor());
    let out = up.forward(&mut tape, &store, f, r).unwrap();
    assert!((tape.value(out.ortho).item() - 13.5).abs() < 1e-12);
}

#[test]
fn update_is_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let up = LrfUpdate::new(&mut store, "u", 4, 3, 0.5, &mut rng).unwrap();
    let out_w = up.out.weight;
    store.get_mut(out_w).value = normal_tensor(4, 27, 0.3, &mut rng);
    let feats = normal_tensor(6, 4, 1.0, &mut rng);
    let frames = frames_tensor(&mut rng, 6, 3);
    let run = |frames: &LrfSet| {
        let mut tape = Tape::new();
        let f = tape.constant(feats.clone());
        let r = tape.constant(frames.to_tensor());
        let out = up.forward(&mut tape, &store, f, r).unwrap();
        (
            LrfSet::from_tensor(tape.value(out.frames)).unwrap(),
            tape.value(out.ortho).item(),
        )
    };
    let (base, loss) = run(&frames);
    assert!(loss > 0.0);
    for _ in 0..8 {
        let rot = sample_uniform_rotation(&mut rng);
        let (moved, l2) = run(&frames.rotated(&rot));
        assert!((l2 - loss).abs() <= 1e-9 * loss);
        for (a, b) in moved.frames().iter().zip(base.rotated(&rot).frames()) {
            assert!((a - b).abs().max() < 1e-9);
        }
    }
}

#[test]
fn ortho_error_vanishes_only_for_orthogonal_blocks() {
    let r = *Rotation3::about_z(0.3).matrix();
    let mut t = Tensor::zeros(2, 9);
    t.row_mut(0).copy_from_slice(r.transpose().as_slice());
    t.row_mut(1).copy_from_slice((r * 1.1).as_slice());
    let e = ortho_errors(&t);
    assert!(e[0] < 1e-15);
    assert!(e[1] > 0.1);
    let reflect = Matrix3::from_diagonal(&nalgebra::Vector3::new(1.0, 1.0, -1.0));
    t.row_mut(1).copy_from_slice(reflect.as_slice());
    assert!(ortho_errors(&t)[1] < 1e-15);
}

#[test]
fn max_pool_examples() {
    let mut tape = Tape::new();
    let f = tape.constant(Tensor::from_rows(&[vec![1.0, 5.0], vec![3.0, 2.0], vec![-1.0, -2.0]]));
    let nb = NeighborIndex::from_lists(vec![vec![0, 1], vec![2], vec![]]);
    let out = max_pool_radius(&mut tape, f, &nb).unwrap();
    assert_eq!(tape.value(out).row(0), &[3.0, 5.0]);
    assert_eq!(tape.value(out).row(1), &[-1.0, -2.0]);
    assert_eq!(tape.value(out).row(2), &[0.0, 0.0]);
}

#[test]
fn upsampling_copies_nearest_coarse_features() {
    let mut tape = Tape::new();
    let pts = vec![Point3::zeros(), Point3::x(), Point3::y()];
    let f = tape.constant(Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]));
    let same = nearest_upsample(&mut tape, f, &pts, &pts).unwrap();
    assert_eq!(tape.value(same).data(), &[1.0, 2.0, 3.0]);
    let one = tape.constant(Tensor::from_rows(&[vec![7.0, 8.0]]));
    let up = nearest_upsample(&mut tape, one, &pts, &[Point3::z()]).unwrap();
    assert_eq!(tape.value(up).data(), &[7.0, 8.0, 7.0, 8.0, 7.0, 8.0]);
}

#[test]
fn average_pool_is_mean_and_order_free() {
    let mut tape = Tape::new();
    let f = tape.constant(Tensor::from_rows(&[vec![2.0, 1.0], vec![2.0, 3.0], vec![2.0, 8.0]]));
    let g = tape.constant(Tensor::from_rows(&[vec![2.0, 8.0], vec![2.0, 1.0], vec![2.0, 3.0]]));
    let seg = Arc::new(Segments::from_lengths([3]));
    let a = global_average_pool(&mut tape, f, seg.clone()).unwrap();
    let b = global_average_pool(&mut tape, g, seg).unwrap();
    assert_eq!(tape.value(a).data(), &[2.0, 4.0]);
    assert_eq!(tape.value(a), tape.value(b));
}

struct BlockFixture {
    points: Vec<Point3>,
    features: Tensor,
    frames: LrfSet,
}

fn fixture(rng: &mut ChaCha8Rng, n: usize, c: usize, j: usize) -> BlockFixture {
    BlockFixture {
        points: (0..n).map(|_| Point3::from_fn(|_, _| rng.gen_range(-0.5..0.5))).collect(),
        features: normal_tensor(n, c, 1.0, rng).clone(),
        frames: frames_tensor(rng, n, j),
    }
}

fn run_block(
    block: &ResidualBlock,
    store: &ParamStore,
    fx: &BlockFixture,
    queries: &[usize],
    rot: &Rotation3,
) -> (Tensor, LrfSet) {
    let pts: Vec<Point3> = fx.points.iter().map(|p| rot.apply(p)).collect();
    let qpts: Vec<Point3> = queries.iter().map(|&i| pts[i]).collect();
    let nb = radius_neighbors(&pts, &qpts, 0.5).unwrap();
    let geom = PairGeometry::new(&pts, &qpts, &nb).unwrap();
    let frames = fx.frames.rotated(rot).to_tensor();
    let mut tape = Tape::new();
    let f = tape.constant(fx.features.clone());
    let sf = tape.constant(frames.clone());
    let qf = tape.gather_rows(sf, queries.to_vec().into()).unwrap();
    let out = block
        .forward(
            &mut tape,
            store,
            BlockInput {
                features: f,
                support_frames: sf,
                query_frames: qf,
                geometry: &geom,
                mode: NormMode::Train,
            },
        )
        .unwrap();
    (
        tape.value(out.features).clone(),
        LrfSet::from_tensor(tape.value(out.frames)).unwrap(),
    )
}

fn make_block(rng: &mut ChaCha8Rng, store: &mut ParamStore, in_dim: usize, out_dim: usize, strided: bool) -> ResidualBlock {
    let spec = ResidualBlockSpec {
        in_dim,
        out_dim,
        strided,
        frame_count: 2,
        merge: true,
        update_lrf: true,
        omega: 0.5,
    };
    let disp = generate_kernel_points(15, 0.33, 0).unwrap().with_sigma(0.15).unwrap();
    ResidualBlock::new(store, "b", spec, disp, rng).unwrap()
}

#[test]
fn residual_block_is_invariant_and_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let block = make_block(&mut rng, &mut store, 4, 8, true);
    let w = block.lrf_update.as_ref().unwrap().out.weight;
    store.get_mut(w).value = normal_tensor(8, 18, 0.2, &mut rng);
    let fx = fixture(&mut rng, 60, 4, 2);
    let queries: Vec<usize> = (0..60).step_by(3).collect();
    let (f0, r0) = run_block(&block, &store, &fx, &queries, &Rotation3::identity());
    assert_eq!(f0.rows(), queries.len());
    assert!(f0.max_abs() > 0.1);
    for _ in 0..8 {
        let rot = sample_uniform_rotation(&mut rng);
        let (f1, r1) = run_block(&block, &store, &fx, &queries, &rot);
        let dev = f1.data().iter().zip(f0.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(dev <= 1e-9 * (1.0 + f0.max_abs()), "feature deviation {dev}");
        for (a, b) in r1.frames().iter().zip(r0.rotated(&rot).frames()) {
            assert!((a - b).abs().max() < 1e-9);
        }
    }
}

#[test]
fn zeroed_branches_give_zero_or_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let block = make_block(&mut rng, &mut store, 4, 8, false);
    store.get_mut(block.expand.linear.weight).value = Tensor::zeros(2, 8);
    store.get_mut(block.shortcut.as_ref().unwrap().linear.weight).value = Tensor::zeros(4, 8);
    let fx = fixture(&mut rng, 20, 4, 2);
    let queries: Vec<usize> = (0..20).collect();
    let (f, r) = run_block(&block, &store, &fx, &queries, &Rotation3::identity());
    assert_eq!(f.max_abs(), 0.0);
    assert_eq!(r.frames(), fx.frames.frames());

    let mut store = ParamStore::new();
    let block = make_block(&mut rng, &mut store, 8, 8, false);
    assert!(block.shortcut.is_none());
    store.get_mut(block.expand.linear.weight).value = Tensor::zeros(2, 8);
    let mut fx = fixture(&mut rng, 20, 8, 2);
    for v in fx.features.data_mut() {
        *v = v.abs();
    }
    let (f, _) = run_block(&block, &store, &fx, &queries, &Rotation3::identity());
    assert_eq!(f, fx.features);
}
