use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::Sgd;
use crate::data::{preprocess, synth_shapes};
use crate::geometry::{apply_rotation, sample_uniform_rotation, PointCloud};

fn clouds(per_class: usize, points: usize, seed: u64) -> Vec<(PointCloud, usize)> {
    synth_shapes(per_class, points, seed)
        .unwrap()
        .samples
        .into_iter()
        .map(|s| (s.cloud, s.class))
        .collect()
}

fn rel_dev(a: &Tensor, b: &Tensor) -> f64 {
    let d = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    d / (1.0 + b.max_abs())
}

fn small_spec(task: Task) -> ArchitectureSpec {
    let mut spec = match task {
        Task::Classify => ArchitectureSpec::toy_classifier(8),
        Task::Segment => ArchitectureSpec::toy_segmenter(16),
    };
    spec.blocks.truncate(5);
    spec.head_hidden = 32;
    spec
}

fn batch_of(model: &Model, raw: &[(PointCloud, usize)], grid: f64) -> Batch {
    let prepared: Vec<PreparedCloud> = raw
        .iter()
        .map(|(c, k)| model.prepare(&preprocess(c, grid).unwrap()).unwrap().with_class(*k))
        .collect();
    Batch::new(&prepared.iter().collect::<Vec<_>>()).unwrap()
}

#[test]
fn build_is_deterministic() {
    let spec = ArchitectureSpec::toy_classifier(8);
    let a = Model::build(spec.clone(), 3).unwrap();
    let b = Model::build(spec.clone(), 3).unwrap();
    let c = Model::build(spec, 4).unwrap();
    let values = |m: &Model| m.store.params().iter().map(|p| p.value.clone()).collect::<Vec<_>>();
    assert_eq!(values(&a), values(&b));
    assert_ne!(values(&a), values(&c));
    assert_eq!(a.parameter_count(), c.parameter_count());
}

#[test]
fn parameter_counts_are_stable() {
    assert_eq!(Model::build(ArchitectureSpec::toy_classifier(8), 0).unwrap().parameter_count(), 2_328_701);
    assert_eq!(
        Model::build(ArchitectureSpec::default_classifier(40), 0).unwrap().parameter_count(),
        36_355_805
    );
}

#[test]
fn width_accounting_differs_by_variant() {
    let full = Model::build(ArchitectureSpec::toy_classifier(8), 0).unwrap();
    let local = Model::build(ArchitectureSpec::toy_classifier(8).with_variant(Variant::OneLocal), 0).unwrap();
    let nomerge = Model::build(ArchitectureSpec::toy_classifier(8).with_variant(Variant::NoMerge), 0).unwrap();
    assert!(full.parameter_count() > nomerge.parameter_count());
    assert!(nomerge.parameter_count() > local.parameter_count());
}

#[test]
fn invalid_specs_fail_at_build() {
    let mut spec = ArchitectureSpec::toy_classifier(8);
    spec.blocks[3].out = 2;
    assert!(matches!(Model::build(spec, 0), Err(Error::Config(_))));
    let mut spec = ArchitectureSpec::toy_classifier(8);
    spec.lrf_scales = vec![];
    assert!(Model::build(spec, 0).is_err());
    let text = ArchitectureSpec::toy_classifier(8).to_text() + "extra = 1\n";
    assert!(ArchitectureSpec::from_text(&text).is_err());
}

#[test]
fn spec_text_round_trips() {
    let spec = ArchitectureSpec::toy_segmenter(16).with_variant(Variant::NoMerge);
    assert_eq!(ArchitectureSpec::from_text(&spec.to_text()).unwrap(), spec);
}

#[test]
fn initial_ortho_loss_is_zero() {
    let model = Model::build(small_spec(Task::Classify), 1).unwrap();
    let batch = batch_of(&model, &clouds(1, 300, 0)[..2], 0.1);
    let p = model.predict(&batch).unwrap();
    assert_eq!(p.ortho_loss, 0.0);
    assert!(p.ortho_error.mean() < 1e-15);
    assert!(p.ortho_error.count > 0);
    assert_eq!(p.logits.shape(), (2, 8));
}

fn perturb_lrf_updates(model: &mut Model, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = model
        .store
        .params()
        .iter()
        .filter(|p| p.name.ends_with("lrf_update.out.weight"))
        .map(|p| p.name.clone())
        .collect();
    for name in names {
        let id = model.store.find(&name).unwrap();
        let p = model.store.get_mut(id);
        let (r, c) = p.value.shape();
        p.value = crate::layers::normal_tensor(r, c, 0.05, rng);
    }
}

fn check_invariance(task: Task, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::build(small_spec(task), seed).unwrap();
    perturb_lrf_updates(&mut model, &mut rng);
    let raw = clouds(1, 400, seed);
    for (cloud, _) in raw.iter().take(3) {
        let base_batch = batch_of(&model, &[(cloud.clone(), 0)], 0.1);
        let base = model.predict(&base_batch).unwrap();
        assert!(base.ortho_loss > 0.0);
        for _ in 0..3 {
            let r = sample_uniform_rotation(&mut rng);
            let moved = batch_of(&model, &[(apply_rotation(&r, cloud), 0)], 0.1);
            let out = model.predict(&moved).unwrap();
            let dev = rel_dev(&out.logits, &base.logits);
            assert!(dev < 1e-8, "{task:?}: relative deviation {dev}");
        }
    }
}

#[test]
fn classifier_is_rotation_invariant() {
    check_invariance(Task::Classify, 11);
}

#[test]
fn segmenter_is_rotation_invariant() {
    check_invariance(Task::Segment, 12);
}

#[test]
fn standard_variant_is_not_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = Model::build(small_spec(Task::Classify).with_variant(Variant::Standard), 0).unwrap();
    let (cloud, _) = clouds(1, 400, 0).swap_remove(5);
    let base = model.predict(&batch_of(&model, &[(cloud.clone(), 0)], 0.1)).unwrap();
    let r = sample_uniform_rotation(&mut rng);
    let moved = model.predict(&batch_of(&model, &[(apply_rotation(&r, &cloud), 0)], 0.1)).unwrap();
    assert!(rel_dev(&moved.logits, &base.logits) > 1e-3);
}

#[test]
fn permutation_permutes_point_outputs() {
    let model = Model::build(small_spec(Task::Segment), 2).unwrap();
    let (cloud, _) = clouds(1, 300, 3).swap_remove(2);
    let pre = preprocess(&cloud, 0.1).unwrap();
    let n = pre.len();
    let perm: Vec<usize> = (0..n).map(|i| (i * 7 + 3) % n).collect();
    assert_eq!(n % 7 != 0, true);
    let pts = perm.iter().map(|&i| pre.points()[i]).collect();
    let permuted = PointCloud::new(pts, Tensor::filled(n, 1, 1.0), None).unwrap();
    let run = |c: &PointCloud| {
        let p = model.prepare(c).unwrap();
        model.predict(&Batch::new(&[&p]).unwrap()).unwrap().logits
    };
    let a = run(&pre);
    let b = run(&permuted);
    for (row, &i) in perm.iter().enumerate() {
        for (x, y) in b.row(row).iter().zip(a.row(i)) {
            assert!((x - y).abs() <= 1e-10 * (1.0 + a.max_abs()));
        }
    }
}

#[test]
fn duplicated_points_leave_logits_unchanged() {
    let model = Model::build(small_spec(Task::Classify), 2).unwrap();
    let (cloud, _) = clouds(1, 300, 4).swap_remove(1);
    let doubled: Vec<_> = cloud.points().iter().chain(cloud.points()).copied().collect();
    let doubled = PointCloud::from_points(doubled).unwrap();
    let a = model.predict(&batch_of(&model, &[(cloud, 0)], 0.1)).unwrap();
    let b = model.predict(&batch_of(&model, &[(doubled, 0)], 0.1)).unwrap();
    assert!(rel_dev(&a.logits, &b.logits) < 1e-12);
}

#[test]
fn empty_batch_is_an_error() {
    assert!(Batch::new(&[]).is_err());
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut model = Model::build(small_spec(Task::Segment), 5).unwrap();
    perturb_lrf_updates(&mut model, &mut rng);
    let ck = Checkpoint::from_model(&model, 5, 7);
    let bytes = ck.to_bytes();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes(), bytes);
    let restored = back.to_model().unwrap();
    let batch = batch_of(&model, &clouds(1, 300, 1)[..2], 0.1);
    let a = model.predict(&batch).unwrap();
    let b = restored.predict(&batch).unwrap();
    assert_eq!(a.logits, b.logits);
    assert_eq!(a.ortho_loss, b.ortho_loss);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ck.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(Checkpoint::from_bytes(&extra).is_err());
    assert!(Checkpoint::from_bytes(b"nonsense").is_err());
}

#[test]
fn total_loss_examples() {
    let mut tape = Tape::new();
    let logits = tape.constant(Tensor::from_rows(&[vec![800.0, 0.0], vec![0.0, 800.0]]));
    let zero = tape.constant(Tensor::scalar(0.0));
    let l = total_loss(&mut tape, logits, vec![0, 1].into(), zero).unwrap();
    assert!(tape.value(l).item() < 1e-300);

    let logits = tape.constant(Tensor::from_rows(&[vec![0.3, -0.2, 1.0]]));
    let ce = tape.softmax_cross_entropy(logits, vec![2].into()).unwrap();
    let raw = tape.constant(Tensor::scalar(1.25));
    let mut parts = Vec::new();
    for omega in [0.0, 0.5, 1.0] {
        let o = tape.scale(raw, omega);
        let l = total_loss(&mut tape, logits, vec![2].into(), o).unwrap();
        assert_eq!(tape.value(l).item(), tape.value(ce).item() + tape.value(o).item());
        parts.push(tape.value(o).item());
    }
    assert_eq!(parts[0], 0.0);
    assert_eq!(parts[2], 2.0 * parts[1]);
}

fn train_step(model: &mut Model, batch: &Batch, opt: &mut Sgd) -> f64 {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, batch, NormMode::Train).unwrap();
    let loss = total_loss(&mut tape, out.logits, batch.classes.clone().unwrap(), out.ortho).unwrap();
    let value = tape.value(loss).item();
    tape.backward(loss).unwrap().accumulate_into(&mut model.store);
    opt.step(&mut model.store).unwrap();
    value
}

fn eval_loss(model: &Model, batch: &Batch) -> f64 {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, batch, NormMode::Train).unwrap();
    let loss = total_loss(&mut tape, out.logits, batch.classes.clone().unwrap(), out.ortho).unwrap();
    tape.value(loss).item()
}

#[test]
fn one_small_step_decreases_the_loss() {
    let raw = clouds(1, 300, 6);
    for trial in 0..10u64 {
        let mut model = Model::build(small_spec(Task::Classify), trial).unwrap();
        let batch = batch_of(&model, &raw[(trial as usize % 4)..][..4], 0.1);
        let mut opt = Sgd::new(&model.store, 1e-4, 0.0);
        let before = train_step(&mut model, &batch, &mut opt);
        let after = eval_loss(&model, &batch);
        assert!(after < before, "trial {trial}: {before} -> {after}");
    }
}
