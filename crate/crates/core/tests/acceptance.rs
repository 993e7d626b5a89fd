//! Acceptance criteria, one test each. Every test writes a single
//! `criterion N [PASS|FAIL] ...` line straight to stderr (visible without
//! `--nocapture`) and then asserts. The tests hold a shared lock so timing
//! limits are measured without competing for the CPU.

use std::io::Write as _;
use std::sync::{Mutex, MutexGuard};
use std::time::{Duration, Instant};

use alignconv::ablation::{ablation_csv, run_ablation, AblationSetup};
use alignconv::data::{synth_shapes, AugmentationSpec, Preprocessing, RotationMode, SynthSpec};
use alignconv::layers::normal_tensor;
use alignconv::network::{ArchitectureSpec, Batch, Model, Variant};
use alignconv::train::{evaluate, train, PreparedSet, TrainOptions};
use alignconv::verify::{
    audit_network_invariance, brute_force_oracles, lrf_equivariance_audits, reduction_audit, conv_invariance_audits,
    toy_gradcheck, AuditConfig, Expect, NETWORK_TOL,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: u32, title: &str, pass: bool, detail: String) {
    let line = format!(
        "criterion {n} [{}] {title}: {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "{line}");
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

/// Toy classifier whose frame updates are moved off the identity.
fn perturbed_toy(seed: u64) -> Model {
    let mut model = Model::build(ArchitectureSpec::toy_classifier(8), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let p = model.store.get_mut(id);
        if p.name.ends_with("lrf_update.out.weight") {
            p.value = normal_tensor(p.value.rows(), p.value.cols(), 0.05, &mut rng);
        }
    }
    model
}

#[test]
fn criterion_1_convolution_invariance() {
    let _g = serial();
    let cfg = AuditConfig::default();
    let t = Instant::now();
    let reports = conv_invariance_audits(&cfg).unwrap();
    let elapsed = t.elapsed();
    let full = cfg.rotations * cfg.inputs;
    let aligned = &reports[0].0;
    let controls: Vec<_> = reports.iter().filter(|(_, e)| *e == Expect::Fail).map(|(r, _)| r).collect();
    let pass = aligned.pass
        && aligned.max_dev < 1e-10
        && aligned.trials == full
        && !controls.is_empty()
        && controls.iter().all(|r| r.max_dev > 1e-3)
        && reports.iter().all(|(r, e)| r.pass == (*e == Expect::Pass))
        && elapsed < Duration::from_secs(60);
    let ctl: Vec<String> = controls.iter().map(|r| format!("{} {:.2e}", r.check, r.max_dev)).collect();
    report(
        1,
        "multi-aligned convolution invariance",
        pass,
        format!(
            "{} trials, max rel dev {:.2e} (< 1e-10); controls: {}; {}",
            aligned.trials,
            aligned.max_dev,
            ctl.join(", "),
            secs(elapsed)
        ),
    );
}

#[test]
fn criterion_2_frame_equivariance() {
    let _g = serial();
    let cfg = AuditConfig::default();
    let t = Instant::now();
    let reports = lrf_equivariance_audits(&cfg).unwrap();
    let elapsed = t.elapsed();
    let full = cfg.rotations * cfg.inputs;
    let pass = reports.iter().all(|(r, _)| r.pass && r.trials == full) && elapsed < Duration::from_secs(60);
    let parts: Vec<String> = reports
        .iter()
        .map(|(r, _)| format!("{} {:.2e}/{:.0e}", r.check, r.max_dev, r.tol))
        .collect();
    report(2, "frame equivariance", pass, format!("{}; {}", parts.join(", "), secs(elapsed)));
}

#[test]
fn criterion_3_network_invariance() {
    let _g = serial();
    let t = Instant::now();
    let model = perturbed_toy(0);
    let raw = synth_shapes(3, 1024, 11).unwrap();
    let clouds: Vec<_> = raw.samples.iter().map(|s| s.cloud.clone()).collect();
    let rotations = 4;
    let pre = Preprocessing::new(model.spec.grid_size);
    let r = audit_network_invariance(&model, &clouds, rotations, NETWORK_TOL, &pre, 0).unwrap();
    let audited = r.trials / rotations;
    let pass = r.pass && audited >= 16;
    report(
        3,
        "end-to-end network invariance",
        pass,
        format!(
            "ten-block toy classifier, {audited} clouds x {rotations} rotations ({} excluded), max rel dev {:.2e} (< 1e-8); {}",
            r.degenerate,
            r.max_dev,
            secs(t.elapsed())
        ),
    );
}

#[test]
fn criterion_4_oracles() {
    let _g = serial();
    let t = Instant::now();
    let reports = brute_force_oracles(0, 100).unwrap();
    let elapsed = t.elapsed();
    let pass = reports.iter().all(|r| r.pass) && elapsed < Duration::from_secs(120);
    let parts: Vec<String> = reports.iter().map(|r| format!("{} {:.1e}", r.check, r.max_dev)).collect();
    report(4, "brute-force oracles", pass, format!("{}; {}", parts.join(", "), secs(elapsed)));
}

#[test]
fn criterion_5_gradients() {
    let _g = serial();
    let t = Instant::now();
    let g = toy_gradcheck(0, usize::MAX).unwrap();
    let elapsed = t.elapsed();
    let unchecked: Vec<&str> = g.params.iter().filter(|p| p.checked == 0).map(|p| p.name.as_str()).collect();
    let pass = g.report.pass && g.report.degenerate == 0 && unchecked.is_empty() && elapsed < Duration::from_secs(300);
    report(
        5,
        "finite-difference gradients",
        pass,
        format!(
            "{} parameter tensors, {} entries, worst score {:.2e} (< 1e-5), {} kink exclusions, unchecked {:?}; {}",
            g.params.len(),
            g.report.trials,
            g.report.max_dev,
            g.report.degenerate,
            unchecked,
            secs(elapsed)
        ),
    );
}

#[test]
fn criterion_6_reduction() {
    let _g = serial();
    let r = reduction_audit(&AuditConfig::default()).unwrap();
    report(
        6,
        "reduction to plain convolution",
        r.pass && r.trials == 20,
        format!("{} configurations, max |diff| {:.2e} (<= 1e-12)", r.trials, r.max_dev),
    );
}

#[test]
fn criterion_7_orthonormalization() {
    let _g = serial();
    let t = Instant::now();
    let spec = ArchitectureSpec::toy_classifier(8);
    let pre = Preprocessing::new(spec.grid_size);
    let train_raw = SynthSpec::new(8, 1024, 1).generate().unwrap();
    let test_raw = SynthSpec::new(4, 1024, 2).generate().unwrap();

    let fresh = Model::build(spec.clone(), 0).unwrap();
    let pre_train = train_raw.preprocessed(pre).unwrap();
    let prepared = PreparedSet::new(&fresh, &pre_train).unwrap();
    let batch = Batch::new(&prepared.clouds[..8].iter().collect::<Vec<_>>()).unwrap();
    let initial = fresh.predict(&batch).unwrap();

    let setup = AblationSetup {
        base: spec,
        train: &train_raw,
        test: &test_raw,
        preprocessing: pre,
        options: TrainOptions {
            epochs: 4,
            ..TrainOptions::default()
        },
        model_seed: 0,
        audit_clouds: 0,
        audit_rotations: 0,
    };
    let rows = run_ablation(&setup, &[(Variant::Full, 0.5), (Variant::Full, 0.0)], |_, _, _| {}).unwrap();
    let (with, without) = (rows[0].test.ortho_error, rows[1].test.ortho_error);
    let pass = initial.ortho_loss.abs() < 1e-12 && initial.ortho_error.mean() < 1e-12 && with < without;
    report(
        7,
        "orthonormalization loss",
        pass,
        format!(
            "initial loss {:.1e}, error {:.1e}; final mean |I - UU^T|_F {with:.4} (omega 0.5) vs {without:.4} (omega 0), {} train clouds x 4 epochs; {}",
            initial.ortho_loss,
            initial.ortho_error.mean(),
            train_raw.len(),
            secs(t.elapsed())
        ),
    );
}

#[test]
fn criterion_8_desk_scale_learning() {
    let _g = serial();
    let t = Instant::now();
    let spec = ArchitectureSpec::toy_classifier(8);
    let pre = Preprocessing::new(spec.grid_size);
    let train_raw = SynthSpec::new(50, 1024, 1).generate().unwrap();
    let test_raw = SynthSpec::new(25, 1024, 2).generate().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rotated_raw = test_raw
        .augmented(&AugmentationSpec::rotation_only(RotationMode::So3), &mut rng)
        .unwrap();

    let mut model = Model::build(spec, 0).unwrap();
    let train_set = PreparedSet::new(&model, &train_raw.preprocessed(pre).unwrap()).unwrap();
    let test_set = PreparedSet::new(&model, &test_raw.preprocessed(pre).unwrap()).unwrap();
    let opts = TrainOptions {
        epochs: 4,
        ..TrainOptions::default()
    };
    train(&mut model, &train_set, None, &opts, |_, _| Ok(())).unwrap();
    let plain = evaluate(&model, &test_set.clouds, 8).unwrap().accuracy;
    let rotated_set = PreparedSet::new(&model, &rotated_raw.preprocessed(pre).unwrap()).unwrap();
    let rotated = evaluate(&model, &rotated_set.clouds, 8).unwrap().accuracy;
    let elapsed = t.elapsed();
    let pass = plain >= 0.9 && (plain - rotated).abs() <= 0.005 && elapsed < Duration::from_secs(1800);
    report(
        8,
        "desk-scale learning",
        pass,
        format!(
            "{} train / {} test clouds, 4 epochs, scenario N: test accuracy {plain:.4} (>= 0.9), SO(3)-rotated {rotated:.4}; {}",
            train_set.len(),
            test_set.len(),
            secs(elapsed)
        ),
    );
}

#[test]
fn criterion_9_ablation_harness() {
    let _g = serial();
    let t = Instant::now();
    let spec = ArchitectureSpec::toy_classifier(8);
    let train_raw = SynthSpec::new(8, 1024, 1).generate().unwrap();
    let test_raw = SynthSpec::new(4, 1024, 2).generate().unwrap();
    let setup = AblationSetup {
        preprocessing: Preprocessing::new(spec.grid_size),
        base: spec,
        train: &train_raw,
        test: &test_raw,
        options: TrainOptions {
            epochs: 2,
            ..TrainOptions::default()
        },
        model_seed: 0,
        audit_clouds: 8,
        audit_rotations: 2,
    };
    let runs: Vec<_> = Variant::ABLATIONS.iter().map(|&v| (v, 0.5)).collect();
    let rows = run_ablation(&setup, &runs, |_, _, _| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ablation.csv");
    std::fs::write(&path, ablation_csv(&rows)).unwrap();
    let csv = std::fs::read_to_string(&path).unwrap();
    let complete = csv.lines().count() == 5 && rows.iter().all(|r| r.records.len() == 2);
    let global = rows.iter().find(|r| r.variant == Variant::OneGlobal).unwrap();
    let global_audit = global.invariance.as_ref().unwrap();
    let summary: Vec<String> = rows
        .iter()
        .map(|r| format!("{} {:.3}", r.variant.name(), r.test.accuracy))
        .collect();
    report(
        9,
        "ablation harness",
        complete && global_audit.pass && global_audit.trials > 0,
        format!(
            "4 variants x 2 epochs on {} clouds, CSV written; one-global invariance {:.2e} over {} trials; test accuracy (reported only) {}; {}",
            train_raw.len(),
            global_audit.max_dev,
            global_audit.trials,
            summary.join(", "),
            secs(t.elapsed())
        ),
    );
}
