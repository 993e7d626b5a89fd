use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::geometry::{apply_rotation, Point3};

fn max_norm(c: &PointCloud) -> f64 {
    c.points().iter().map(|p| p.norm()).fold(0.0, f64::max)
}

#[test]
fn xyz_parses_points_and_reports_bad_lines() {
    let c = parse_xyz("0 0 0\n1 0 0", Path::new("a.xyz")).unwrap();
    assert_eq!(c.len(), 2);
    assert!(c.labels().is_none());
    let err = parse_xyz("a b c", Path::new("a.xyz")).unwrap_err();
    assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
    let err = parse_xyz("0 0 0 1\n1 2", Path::new("a.xyz")).unwrap_err();
    assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    let c = parse_xyz("# header\n0 0 0 3\n\n1 0 0 4\n", Path::new("a.xyz")).unwrap();
    assert_eq!(c.labels(), Some(&[3, 4][..]));
}

#[test]
fn ply_round_trips_and_rejects_faces() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ply");
    let pts = vec![Point3::new(0.1, -2.0, 3.5), Point3::new(1.0 / 3.0, 0.0, 1e-7), Point3::new(-4.0, 5.0, 6.0)];
    let cloud = PointCloud::from_points(pts).unwrap().with_labels(Some(vec![0, 1, 2])).unwrap();
    save_ply(&cloud, &path).unwrap();
    assert_eq!(load_cloud(&path).unwrap(), cloud);
    let xyz = dir.path().join("c.xyz");
    save_xyz(&cloud, &xyz).unwrap();
    assert_eq!(load_cloud(&xyz).unwrap(), cloud);

    let faces = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\n\
                 element face 1\nproperty list uchar int vertex_indices\nend_header\n0 0 0\n3 0 0 0\n";
    std::fs::write(&path, faces).unwrap();
    let msg = load_cloud(&path).unwrap_err().to_string();
    assert!(msg.contains("face"), "{msg}");
    std::fs::write(&path, "ply\nformat binary_little_endian 1.0\nend_header\n").unwrap();
    assert!(load_cloud(&path).is_err());
}

#[test]
fn manifest_resolves_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    save_xyz(&PointCloud::from_points(vec![Point3::zeros(), Point3::x()]).unwrap(), &dir.path().join("a.xyz")).unwrap();
    let m = dir.path().join("list.txt");
    std::fs::write(&m, "a.xyz 3\n\na.xyz 1\n").unwrap();
    let ds = Dataset::from_manifest(&m, Split::Test).unwrap();
    assert_eq!(ds.len(), 2);
    assert_eq!(ds.class_count, 4);
    assert_eq!(ds.samples[0].class, 3);
    std::fs::write(&m, "a.xyz x\n").unwrap();
    assert!(matches!(load_manifest(&m), Err(Error::Parse { line: 1, .. })));
}

#[test]
fn preprocess_recenters_and_rescales() {
    let pts = vec![
        Point3::new(0.9, 0.1, 0.0),
        Point3::new(-0.5, 0.7, 0.1),
        Point3::new(0.1, -0.6, 0.4),
        Point3::new(0.3, 0.2, -0.8),
    ];
    let cloud = PointCloud::from_points(pts.clone()).unwrap();
    let out = preprocess(&cloud, 0.01).unwrap();
    assert_eq!(out.len(), 4);
    assert!((max_norm(&out) - 1.0).abs() < 1e-12);
    assert!(out.centroid().norm() < 1e-12);
    assert_eq!(out.features().cols(), 1);
    assert!(out.features().data().iter().all(|&v| v == 1.0));
    let c = crate::geometry::centroid(&pts);
    let s = pts.iter().map(|p| (p - c).norm()).fold(0.0, f64::max);
    for p in out.points() {
        let back = p * s + c;
        assert!(pts.iter().any(|q| (q - back).norm() < 1e-12));
    }
}

#[test]
fn preprocess_commutes_with_rotation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ds = synth_shapes(1, 400, 9).unwrap();
    for s in &ds.samples {
        let base = preprocess(&s.cloud, 0.05).unwrap();
        for _ in 0..4 {
            let r = sample_uniform_rotation(&mut rng);
            let moved = preprocess(&apply_rotation(&r, &s.cloud), 0.05).unwrap();
            assert_eq!(moved.len(), base.len());
            assert_eq!(moved.labels(), base.labels());
            for (a, b) in moved.points().iter().zip(base.points()) {
                assert!((a - r.apply(b)).norm() < 1e-9);
            }
        }
    }
}

#[test]
fn height_feature_is_z() {
    let cloud = PointCloud::from_points(vec![Point3::new(0.0, 0.0, 1.0), Point3::new(0.0, 0.0, -1.0), Point3::x()])
        .unwrap();
    let p = Preprocessing {
        height_feature: true,
        ..Preprocessing::new(0.01)
    };
    let out = p.apply(&cloud).unwrap();
    assert_eq!(out.features().cols(), 2);
    for (i, q) in out.points().iter().enumerate() {
        assert_eq!(out.features().get(i, 1), q.z);
    }
    assert!(preprocess(&cloud, 0.0).is_err());
}

#[test]
fn synthetic_dataset_is_balanced_and_seeded() {
    let a = synth_shapes(3, 200, 1).unwrap();
    assert_eq!(a.len(), 24);
    assert_eq!(a.class_counts(), vec![3; 8]);
    assert_eq!(a, synth_shapes(3, 200, 1).unwrap());
    assert_ne!(a, synth_shapes(3, 200, 2).unwrap());
    for s in &a.samples {
        assert_eq!(s.cloud.len(), 200);
        let labels = s.cloud.labels().unwrap();
        assert!(labels.iter().all(|&l| l / PARTS_PER_CLASS == s.class));
        assert!(labels.iter().any(|&l| l % 2 == 0) && labels.iter().any(|&l| l % 2 == 1), "class {}", s.class);
    }
}

#[test]
fn sphere_points_lie_on_the_scaled_sphere() {
    let spec = SynthSpec {
        jitter_ratio: 0.0,
        ..SynthSpec::new(5, 300, 4)
    };
    for s in spec.generate().unwrap().samples.iter().filter(|s| s.class == 0) {
        let r = s.cloud.points()[0].norm();
        assert!((0.8..=1.2).contains(&r));
        for p in s.cloud.points() {
            assert!((p.norm() - r).abs() < 1e-12);
        }
    }
    for s in synth_shapes(5, 300, 4).unwrap().samples.iter().filter(|s| s.class == 0) {
        let norms: Vec<f64> = s.cloud.points().iter().map(|p| p.norm()).collect();
        let mean = norms.iter().sum::<f64>() / norms.len() as f64;
        let within = norms.iter().filter(|&&n| (n - mean).abs() <= 0.02 * mean).count();
        assert!(within as f64 >= 0.6 * norms.len() as f64);
        assert!(norms.iter().all(|&n| (n - mean).abs() <= 0.1 * mean));
    }
}

#[test]
fn augment_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cloud = synth_shapes(1, 50, 0).unwrap().samples[4].cloud.clone();
    assert_eq!(augment(&cloud, &AugmentationSpec::identity(), &mut rng).unwrap(), cloud);
    let z = augment(&cloud, &AugmentationSpec::rotation_only(RotationMode::Z), &mut rng).unwrap();
    for (a, b) in z.points().iter().zip(cloud.points()) {
        assert!((a.z - b.z).abs() < 1e-12);
        assert!((a.norm() - b.norm()).abs() < 1e-12);
    }
    let spec = AugmentationSpec {
        rotation: RotationMode::None,
        jitter: 0.0,
        scale: (2.0, 2.0),
    };
    let s = augment(&cloud, &spec, &mut rng).unwrap();
    assert_eq!(s.points()[3], cloud.points()[3] * 2.0);
    let bad = AugmentationSpec { scale: (1.0, 0.5), ..spec };
    assert!(augment(&cloud, &bad, &mut rng).is_err());
}

#[test]
fn so3_mode_matches_uniform_rotation_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 20000;
    let mut mean = nalgebra::Matrix3::zeros();
    let mut trace_sq = 0.0;
    for _ in 0..n {
        let m = *RotationMode::So3.sample(&mut rng).matrix();
        mean += m;
        trace_sq += m.trace().powi(2);
    }
    mean /= n as f64;
    assert!(mean.abs().max() < 0.03);
    assert!((trace_sq / n as f64 - 1.0).abs() < 0.05);
}

#[test]
fn preprocessing_twice_is_rejected() {
    let ds = synth_shapes(1, 100, 0).unwrap();
    let p = ds.preprocessed(Preprocessing::new(0.05)).unwrap();
    assert_eq!(p.preprocessing, Some(Preprocessing::new(0.05)));
    assert!(p.preprocessed(Preprocessing::new(0.05)).is_err());
}
