use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use alignconv::ablation::{ablation_csv, run_ablation, AblationRow, AblationSetup};
use alignconv::data::{save_manifest, save_xyz, AugmentationSpec, Dataset, Preprocessing, RotationMode, SHAPE_CLASSES};
use alignconv::network::{Checkpoint, Model, Task, Variant};
use alignconv::train::{evaluate, train, EpochRecord, Metrics, PreparedSet};
use alignconv::verify::{run_suite, toy_gradcheck, NetworkAudit};
use alignconv::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    fs::create_dir_all(&cfg.out_dir)?;
    Ok(&cfg.out_dir)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::from(e).into())
}

pub fn train_cmd(cfg: &RunConfig) -> Result<()> {
    let dir = out_dir(cfg)?;
    write(&dir.join("config.toml"), &cfg.to_text())?;
    let (train_raw, test_raw) = cfg.datasets()?;
    let pre = cfg.preprocessing();
    let mut model = Model::build(cfg.architecture(train_raw.class_count)?, cfg.seed)?;
    let train_set = PreparedSet::new(&model, &train_raw.preprocessed(pre)?)?;
    let test_set = PreparedSet::new(&model, &test_raw.preprocessed(pre)?)?;
    println!(
        "{} {} parameters, {} train / {} test clouds",
        model.spec.variant.name(),
        model.parameter_count(),
        train_set.len(),
        test_set.len()
    );

    let metrics_path = dir.join("metrics.csv");
    let mut metrics = fs::File::create(&metrics_path)?;
    writeln!(metrics, "{}", EpochRecord::CSV_HEADER)?;
    let (last_path, best_path) = (dir.join("last.ckpt"), dir.join("best.ckpt"));
    let mut best = f64::NEG_INFINITY;
    let mut last_test: Option<Metrics> = None;
    let result = train(&mut model, &train_set, Some(&test_set), &cfg.train_options(), |r, m| {
        writeln!(metrics, "{}", r.csv_row())?;
        metrics.flush()?;
        let finite = [r.train_loss, r.ortho_loss, r.ortho_error].iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite(format!("epoch {} metrics", r.epoch)));
        }
        let ckpt = Checkpoint::from_model(m, cfg.seed, r.epoch as u64);
        ckpt.save(&last_path)?;
        let score = r.test.as_ref().map_or(r.train_accuracy, Metrics::headline);
        if score > best {
            best = score;
            ckpt.save(&best_path)?;
        }
        println!(
            "epoch {:>3}  loss {:.4}  ortho {:.4}  train_acc {:.4}  test {:.4}  ortho_err {:.4}",
            r.epoch, r.train_loss, r.ortho_loss, r.train_accuracy, score, r.ortho_error
        );
        last_test = r.test.clone();
        Ok(())
    });
    if let Err(e) = result {
        let kept = if last_path.exists() {
            format!("; last good checkpoint kept at {}", last_path.display())
        } else {
            String::new()
        };
        eprintln!("training aborted: {e}{kept}");
        return Err(e.into());
    }
    if let Some(t) = last_test {
        write(&dir.join("per_class.csv"), &t.per_class_csv())?;
    }
    println!("best test score {best:.4}; outputs in {}", dir.display());
    Ok(())
}

fn task_name(t: Task) -> &'static str {
    match t {
        Task::Classify => "classification",
        Task::Segment => "segmentation",
    }
}

fn rotated(data: &Dataset, mode: RotationMode, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(data.augmented(&AugmentationSpec::rotation_only(mode), &mut rng)?)
}

pub fn eval_cmd(cfg: &RunConfig, checkpoint: &Path, scenario: &str) -> Result<()> {
    let mode = RotationMode::parse(scenario)?;
    let model = Checkpoint::load(checkpoint)?.to_model()?;
    let test = cfg.test_set()?;
    let expected = cfg.outputs(test.class_count);
    if model.spec.classes != expected || model.spec.task != cfg.task {
        return Err(Error::Config(format!(
            "checkpoint has {} outputs for {}, the dataset needs {expected} for {}",
            model.spec.classes,
            task_name(model.spec.task),
            task_name(cfg.task)
        ))
        .into());
    }
    let pre = Preprocessing {
        grid: model.spec.grid_size,
        ..cfg.preprocessing()
    };
    if pre.feature_count() != model.spec.in_features {
        return Err(Error::Config(format!(
            "checkpoint expects {} input features, preprocessing gives {}",
            model.spec.in_features,
            pre.feature_count()
        ))
        .into());
    }
    let set = PreparedSet::new(&model, &rotated(&test, mode, cfg.seed)?.preprocessed(pre)?)?;
    let m = evaluate(&model, &set.clouds, cfg.batch)?;
    let dir = out_dir(cfg)?;
    let name = mode.name();
    write(
        &dir.join(format!("eval_{name}.csv")),
        &format!(
            "scenario,clouds,accuracy,miou,ortho_error\n{name},{},{},{},{}\n",
            set.len(),
            m.accuracy,
            m.miou.map(|v| v.to_string()).unwrap_or_default(),
            m.ortho_error
        ),
    )?;
    write(&dir.join(format!("eval_{name}_per_class.csv")), &m.per_class_csv())?;
    match model.spec.task {
        Task::Classify => println!("scenario {name}: accuracy {:.4} over {} clouds", m.accuracy, set.len()),
        Task::Segment => println!(
            "scenario {name}: class mIoU {:.4}, point accuracy {:.4} over {} clouds",
            m.headline(),
            m.accuracy,
            set.len()
        ),
    }
    Ok(())
}

pub fn audit_cmd(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    let test = cfg.test_set()?;
    let model = match checkpoint {
        Some(p) => Checkpoint::load(p)?.to_model()?,
        None => Model::build(cfg.architecture(test.class_count)?, cfg.seed)?,
    };
    let pre = Preprocessing {
        grid: model.spec.grid_size,
        ..cfg.preprocessing()
    };
    let clouds: Vec<_> = test.samples.iter().take(cfg.audit_clouds).map(|s| s.cloud.clone()).collect();
    let network = (!clouds.is_empty()).then_some(NetworkAudit {
        model: &model,
        clouds: &clouds,
        preprocessing: &pre,
        rotations: cfg.audit_network_rotations,
    });
    let suite = run_suite(&cfg.audit_config(), network)?;
    print!("{}", suite.text());
    write(&out_dir(cfg)?.join("audit.csv"), &suite.csv())?;
    if suite.ok() {
        Ok(())
    } else {
        Err(CliError::AuditFailed("some audits did not meet their expectation".into()))
    }
}

pub fn ablate_cmd(cfg: &RunConfig) -> Result<()> {
    let dir = out_dir(cfg)?;
    let (train_raw, test_raw) = cfg.datasets()?;
    let setup = AblationSetup {
        base: cfg.architecture(train_raw.class_count)?,
        train: &train_raw,
        test: &test_raw,
        preprocessing: cfg.preprocessing(),
        options: cfg.train_options(),
        model_seed: cfg.seed,
        audit_clouds: cfg.audit_clouds,
        audit_rotations: cfg.audit_network_rotations,
    };
    let log = |v: Variant, w: f64, r: &EpochRecord| {
        println!("{:<9} omega {w:<5} {}", v.name(), r.csv_row());
    };
    let runs: Vec<_> = cfg.variants.iter().map(|&v| (v, cfg.omega)).collect();
    let rows = run_ablation(&setup, &runs, log)?;
    write(&dir.join("ablation.csv"), &ablation_csv(&rows))?;
    print!("{}", ablation_csv(&rows));
    let mut all = rows;
    if !cfg.omegas.is_empty() {
        let sweep: Vec<_> = cfg.omegas.iter().map(|&w| (Variant::Full, w)).collect();
        let rows = run_ablation(&setup, &sweep, log)?;
        write(&dir.join("omega_sweep.csv"), &ablation_csv(&rows))?;
        print!("{}", ablation_csv(&rows));
        all.extend(rows);
    }
    let broken: Vec<&AblationRow> = all
        .iter()
        .filter(|r| r.variant != Variant::Standard && r.invariance.as_ref().is_some_and(|a| !a.pass))
        .collect();
    if broken.is_empty() {
        Ok(())
    } else {
        let names: Vec<_> = broken.iter().map(|r| format!("{} (omega {})", r.variant.name(), r.omega)).collect();
        Err(CliError::AuditFailed(format!("invariance audit failed for {}", names.join(", "))))
    }
}

pub fn gen_data_cmd(cfg: &RunConfig) -> Result<()> {
    if cfg.train_manifest.is_some() {
        return Err(Error::Config("gen-data writes synthetic data; drop the manifest keys".into()).into());
    }
    let dir = out_dir(cfg)?;
    let (train_raw, test_raw) = cfg.datasets()?;
    for (name, data) in [("train", &train_raw), ("test", &test_raw)] {
        fs::create_dir_all(dir.join(name))?;
        let mut entries = Vec::with_capacity(data.len());
        for (i, s) in data.samples.iter().enumerate() {
            let rel = PathBuf::from(name).join(format!("{}_{i:05}.xyz", SHAPE_CLASSES[s.class].name()));
            save_xyz(&s.cloud, &dir.join(&rel))?;
            entries.push((rel, s.class));
        }
        save_manifest(&entries, &dir.join(format!("{name}.txt")))?;
    }
    println!(
        "wrote {} train and {} test clouds with manifests train.txt / test.txt in {}",
        train_raw.len(),
        test_raw.len(),
        dir.display()
    );
    Ok(())
}

pub fn gradcheck_cmd(cfg: &RunConfig) -> Result<()> {
    let g = toy_gradcheck(cfg.seed, usize::MAX)?;
    let mut csv = String::from("param,checked,excluded,max_rel,max_abs\n");
    for p in &g.params {
        println!(
            "{:<36} checked {:>4}  excluded {:>3}  max_rel {:.3e}  max_abs {:.3e}",
            p.name, p.checked, p.excluded, p.max_rel, p.max_abs
        );
        csv.push_str(&format!("{},{},{},{:e},{:e}\n", p.name, p.checked, p.excluded, p.max_rel, p.max_abs));
    }
    println!("{}", g.report.line());
    write(&out_dir(cfg)?.join("gradcheck.csv"), &csv)?;
    if g.report.pass {
        Ok(())
    } else {
        Err(CliError::AuditFailed("gradient check failed".into()))
    }
}
