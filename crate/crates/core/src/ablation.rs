//! Paired training runs over architecture variants and ω values on one
//! dataset and seed.

use std::fmt::Write as _;

use crate::data::{Dataset, Preprocessing};
use crate::error::{Error, Result};
use crate::network::{ArchitectureSpec, Model, Variant};
use crate::train::{train, EpochRecord, Metrics, PreparedSet, TrainOptions};
use crate::verify::{audit_network_invariance, AuditReport, NETWORK_TOL};

/// Shared inputs of every run. Datasets are raw; `preprocessing` is applied
/// once up front.
#[derive(Clone, Debug)]
pub struct AblationSetup<'a> {
    pub base: ArchitectureSpec,
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    pub preprocessing: Preprocessing,
    pub options: TrainOptions,
    pub model_seed: u64,
    /// Raw test clouds audited for whole-cloud rotation invariance after
    /// training; 0 skips the audit.
    pub audit_clouds: usize,
    pub audit_rotations: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub omega: f64,
    pub parameters: usize,
    pub records: Vec<EpochRecord>,
    pub test: Metrics,
    pub invariance: Option<AuditReport>,
}

impl AblationRow {
    pub const CSV_HEADER: &'static str = "variant,omega,parameters,epochs,train_loss,train_accuracy,test_accuracy,test_miou,ortho_error,invariance_max_dev,invariance_pass";

    pub fn csv_row(&self) -> String {
        let last = self.records.last();
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.variant.name(),
            self.omega,
            self.parameters,
            self.records.len(),
            opt(last.map(|r| r.train_loss)),
            opt(last.map(|r| r.train_accuracy)),
            self.test.accuracy,
            opt(self.test.miou),
            self.test.ortho_error,
            self.invariance.as_ref().map(|r| format!("{:e}", r.max_dev)).unwrap_or_default(),
            self.invariance.as_ref().map(|r| r.pass.to_string()).unwrap_or_default(),
        )
    }
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{}\n", AblationRow::CSV_HEADER);
    for r in rows {
        writeln!(s, "{}", r.csv_row()).expect("writing to a string");
    }
    s
}

/// Trains one model per `(variant, ω)` with identical seeds and data, then
/// evaluates it on the test set and optionally audits it.
pub fn run_ablation(
    setup: &AblationSetup<'_>,
    runs: &[(Variant, f64)],
    mut on_epoch: impl FnMut(Variant, f64, &EpochRecord),
) -> Result<Vec<AblationRow>> {
    if runs.is_empty() {
        return Err(Error::invalid("no ablation runs requested"));
    }
    let train_set = setup.train.preprocessed(setup.preprocessing)?;
    let test_set = setup.test.preprocessed(setup.preprocessing)?;
    let audit_raw: Vec<_> = setup
        .test
        .samples
        .iter()
        .take(setup.audit_clouds)
        .map(|s| s.cloud.clone())
        .collect();
    let mut rows = Vec::with_capacity(runs.len());
    for &(variant, omega) in runs {
        let spec = ArchitectureSpec {
            omega,
            ..setup.base.clone().with_variant(variant)
        };
        let mut model = Model::build(spec, setup.model_seed)?;
        let prepared_train = PreparedSet::new(&model, &train_set)?;
        let prepared_test = PreparedSet::new(&model, &test_set)?;
        let records = train(&mut model, &prepared_train, Some(&prepared_test), &setup.options, |r, _| {
            on_epoch(variant, omega, r);
            Ok(())
        })?;
        let test = records
            .last()
            .and_then(|r| r.test.clone())
            .ok_or_else(|| Error::invalid("ablation needs at least one epoch"))?;
        let invariance = (!audit_raw.is_empty())
            .then(|| {
                audit_network_invariance(
                    &model,
                    &audit_raw,
                    setup.audit_rotations,
                    NETWORK_TOL,
                    &setup.preprocessing,
                    setup.options.seed,
                )
            })
            .transpose()?;
        rows.push(AblationRow {
            variant,
            omega,
            parameters: model.parameter_count(),
            records,
            test,
            invariance,
        });
    }
    Ok(rows)
}
