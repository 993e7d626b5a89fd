//! Training loop and evaluation metrics.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{apply_stat_updates, NormMode, Sgd, Tape, BN_MOMENTUM};
use crate::data::{augment, AugmentationSpec, Dataset};
use crate::error::{Error, Result};
use crate::network::{total_loss, Batch, Model, OrthoError, PreparedCloud, Task};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub lr: f64,
    pub momentum: f64,
    /// Learning rate multiplier applied after every epoch.
    pub lr_decay: f64,
    pub clip_norm: Option<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Applied to the preprocessed training clouds every epoch.
    pub augmentation: AugmentationSpec,
    /// Recompute batch-norm running statistics over the training set at the
    /// end of each epoch (see [`recalibrate_batch_norm`]).
    pub recalibrate_bn: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            momentum: 0.9,
            lr_decay: 0.1f64.powf(1.0 / 100.0),
            clip_norm: Some(10.0),
            epochs: 100,
            batch_size: 8,
            seed: 0,
            augmentation: AugmentationSpec::identity(),
            recalibrate_bn: true,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.lr_decay > 0.0) {
            return Err(Error::Config(format!(
                "lr must be positive, momentum in [0, 1), lr_decay positive (got {}, {}, {})",
                self.lr, self.momentum, self.lr_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        self.augmentation.validate()
    }
}

/// Per-epoch record; the test fields are `None` without a test set.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean total loss over the epoch's batches.
    pub train_loss: f64,
    /// Mean orthonormalization loss over the epoch's batches.
    pub ortho_loss: f64,
    pub train_accuracy: f64,
    /// Mean `‖I − U Uᵀ‖_F` on the test set (or the training set without one).
    pub ortho_error: f64,
    pub test: Option<Metrics>,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str =
        "epoch,lr,train_loss,ortho_loss,train_accuracy,ortho_error,test_accuracy,test_miou";

    pub fn csv_row(&self) -> String {
        let (acc, miou) = match &self.test {
            Some(m) => (fmt_opt(Some(m.accuracy)), fmt_opt(m.miou)),
            None => (String::new(), String::new()),
        };
        format!(
            "{},{},{},{},{},{},{acc},{miou}",
            self.epoch, self.lr, self.train_loss, self.ortho_loss, self.train_accuracy, self.ortho_error
        )
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Clouds ready for the network with their preprocessed source kept for
/// augmentation.
pub struct PreparedSet {
    pub clouds: Vec<PreparedCloud>,
    sources: Vec<(crate::geometry::PointCloud, usize)>,
}

impl PreparedSet {
    /// `dataset` must already be preprocessed.
    pub fn new(model: &Model, dataset: &Dataset) -> Result<Self> {
        if dataset.preprocessing.is_none() {
            return Err(Error::invalid("dataset must be preprocessed before preparation"));
        }
        if dataset.is_empty() {
            return Err(Error::invalid("empty dataset"));
        }
        let sources: Vec<_> = dataset.samples.iter().map(|s| (s.cloud.clone(), s.class)).collect();
        let clouds = sources
            .iter()
            .map(|(c, k)| Ok(model.prepare(c)?.with_class(*k)))
            .collect::<Result<_>>()?;
        Ok(Self { clouds, sources })
    }

    pub fn len(&self) -> usize {
        self.clouds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clouds.is_empty()
    }

    fn augmented(&self, model: &Model, spec: &AugmentationSpec, rng: &mut ChaCha8Rng) -> Result<Vec<PreparedCloud>> {
        self.sources
            .iter()
            .map(|(c, k)| Ok(model.prepare(&augment(c, spec, rng)?)?.with_class(*k)))
            .collect()
    }
}

fn labels_for(model: &Model, batch: &Batch) -> Result<std::sync::Arc<[usize]>> {
    let labels = match model.spec.task {
        Task::Classify => batch.classes.clone(),
        Task::Segment => batch.point_labels.clone(),
    };
    let labels = labels.ok_or_else(|| Error::invalid("batch lacks labels for the task"))?;
    if let Some(&bad) = labels.iter().find(|&&l| l >= model.spec.classes) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {} classes",
            model.spec.classes
        )));
    }
    Ok(labels)
}

/// One optimizer step on `batch`; returns (total loss, ortho loss, correct
/// predictions, predicted rows).
pub fn train_step(model: &mut Model, opt: &mut Sgd, batch: &Batch) -> Result<(f64, f64, usize, usize)> {
    let labels = labels_for(model, batch)?;
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, batch, NormMode::Train)?;
    let loss = total_loss(&mut tape, out.logits, labels.clone(), out.ortho)?;
    tape.check_finite(loss, "loss")?;
    let loss_value = tape.value(loss).item();
    let ortho = tape.value(out.ortho).item();
    let correct = argmax_rows(tape.value(out.logits))
        .iter()
        .zip(labels.iter())
        .filter(|(p, l)| p == l)
        .count();
    tape.backward(loss)?.accumulate_into(&mut model.store);
    apply_stat_updates(&mut model.store, tape.stat_updates(), BN_MOMENTUM);
    opt.step(&mut model.store)?;
    Ok((loss_value, ortho, correct, labels.len()))
}

/// Replaces the batch-norm running statistics by the average of the batch
/// statistics over `clouds` under the current parameters. Running averages
/// accumulated during training lag behind fast-moving weights, which makes
/// eval-mode outputs disagree with train-mode ones.
pub fn recalibrate_batch_norm(model: &mut Model, clouds: &[PreparedCloud], batch_size: usize) -> Result<()> {
    for (b, chunk) in clouds.chunks(batch_size.max(1)).enumerate() {
        let batch = Batch::new(&chunk.iter().collect::<Vec<_>>())?;
        let mut tape = Tape::new();
        model.forward(&mut tape, &batch, NormMode::Train)?;
        let keep = b as f64 / (b + 1) as f64;
        apply_stat_updates(&mut model.store, tape.stat_updates(), keep);
    }
    Ok(())
}

/// Runs `opts.epochs` epochs. `on_epoch` sees every record together with
/// the model after that epoch; returning an error stops training.
pub fn train(
    model: &mut Model,
    train_set: &PreparedSet,
    test_set: Option<&PreparedSet>,
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochRecord, &Model) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    opts.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut opt = Sgd::new(&model.store, opts.lr, opts.momentum).with_clip_norm(opts.clip_norm);
    let augmenting = opts.augmentation != AugmentationSpec::identity();
    let mut records = Vec::with_capacity(opts.epochs);
    for epoch in 1..=opts.epochs {
        let fresh;
        let clouds: &[PreparedCloud] = if augmenting {
            fresh = train_set.augmented(model, &opts.augmentation, &mut rng)?;
            &fresh
        } else {
            &train_set.clouds
        };
        let mut order: Vec<usize> = (0..clouds.len()).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut ortho_sum, mut correct, mut rows, mut steps) = (0.0, 0.0, 0, 0, 0);
        for chunk in order.chunks(opts.batch_size) {
            let members: Vec<&PreparedCloud> = chunk.iter().map(|&i| &clouds[i]).collect();
            let batch = Batch::new(&members)?;
            let (l, o, c, r) = train_step(model, &mut opt, &batch)?;
            loss_sum += l;
            ortho_sum += o;
            correct += c;
            rows += r;
            steps += 1;
        }
        if opts.recalibrate_bn {
            recalibrate_batch_norm(model, &train_set.clouds, opts.batch_size)?;
        }
        let test = test_set
            .map(|t| evaluate(model, &t.clouds, opts.batch_size))
            .transpose()?;
        let ortho_error = match &test {
            Some(m) => m.ortho_error,
            None => evaluate(model, &train_set.clouds, opts.batch_size)?.ortho_error,
        };
        let record = EpochRecord {
            epoch,
            lr: opt.lr,
            train_loss: loss_sum / steps as f64,
            ortho_loss: ortho_sum / steps as f64,
            train_accuracy: correct as f64 / rows as f64,
            ortho_error,
            test,
        };
        on_epoch(&record, model)?;
        records.push(record);
        opt.lr *= opts.lr_decay;
    }
    Ok(records)
}

/// Evaluation results. `accuracy` is the overall accuracy over clouds
/// (classification) or points (segmentation); `miou` is the mean over object
/// classes of the per-class average instance IoU (segmentation only).
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub miou: Option<f64>,
    pub per_class: Vec<ClassMetric>,
    pub ortho_error: f64,
}

/// Accuracy (classification) or mean instance IoU (segmentation) of one
/// object class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetric {
    pub class: usize,
    pub count: usize,
    pub value: f64,
}

impl Metrics {
    pub const PER_CLASS_HEADER: &'static str = "class,count,value";

    /// Headline number: mIoU for segmentation, accuracy otherwise.
    pub fn headline(&self) -> f64 {
        self.miou.unwrap_or(self.accuracy)
    }

    pub fn per_class_csv(&self) -> String {
        let mut s = format!("{}\n", Self::PER_CLASS_HEADER);
        for c in &self.per_class {
            s.push_str(&format!("{},{},{}\n", c.class, c.count, c.value));
        }
        s
    }
}

pub fn argmax_rows(t: &crate::autodiff::Tensor) -> Vec<usize> {
    argmax_rows_in(t, |_| 0..t.cols())
}

fn argmax_rows_in(t: &crate::autodiff::Tensor, range: impl Fn(usize) -> std::ops::Range<usize>) -> Vec<usize> {
    (0..t.rows())
        .map(|r| {
            let row = t.row(r);
            let cols = range(r);
            let mut best = cols.start;
            for c in cols {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Eval-mode metrics over `clouds`. Segmentation labels are global part
/// labels `class * parts_per_class + part` with
/// [`crate::data::PARTS_PER_CLASS`] parts per class; predictions are
/// restricted to the parts of each cloud's class.
pub fn evaluate(model: &Model, clouds: &[PreparedCloud], batch_size: usize) -> Result<Metrics> {
    if clouds.is_empty() {
        return Err(Error::invalid("empty evaluation set"));
    }
    let task = model.spec.task;
    let classes = match task {
        Task::Classify => model.spec.classes,
        Task::Segment => model.spec.classes / crate::data::PARTS_PER_CLASS,
    };
    let mut ortho = OrthoError::default();
    let mut correct = 0usize;
    let mut rows = 0usize;
    let mut class_hits = vec![0.0; classes];
    let mut class_count = vec![0usize; classes];
    for chunk in clouds.chunks(batch_size.max(1)) {
        let batch = Batch::new(&chunk.iter().collect::<Vec<_>>())?;
        let labels = labels_for(model, &batch)?;
        let pred = model.predict(&batch)?;
        ortho.merge(pred.ortho_error);
        match task {
            Task::Classify => {
                for (p, &l) in argmax_rows(&pred.logits).iter().zip(labels.iter()) {
                    let hit = usize::from(*p == l);
                    correct += hit;
                    class_hits[l] += hit as f64;
                    class_count[l] += 1;
                }
                rows += labels.len();
            }
            Task::Segment => {
                let seg = batch.first_level();
                for (ci, cloud) in chunk.iter().enumerate() {
                    let class = cloud
                        .class
                        .ok_or_else(|| Error::invalid("segmentation cloud lacks its object class"))?;
                    if class >= classes {
                        return Err(Error::invalid(format!("class {class} out of range")));
                    }
                    let ppc = crate::data::PARTS_PER_CLASS;
                    let range = seg.range(ci);
                    let lo = class * ppc;
                    let truth = &labels[range.clone()];
                    let logits = &pred.logits;
                    let predicted: Vec<usize> = argmax_rows_in(logits, |_| lo..lo + ppc)[range].to_vec();
                    correct += predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
                    rows += truth.len();
                    class_hits[class] += instance_iou(&predicted, truth, lo..lo + ppc);
                    class_count[class] += 1;
                }
            }
        }
    }
    let per_class: Vec<ClassMetric> = (0..classes)
        .filter(|&c| class_count[c] > 0)
        .map(|c| ClassMetric {
            class: c,
            count: class_count[c],
            value: class_hits[c] / class_count[c] as f64,
        })
        .collect();
    let miou = (task == Task::Segment)
        .then(|| per_class.iter().map(|c| c.value).sum::<f64>() / per_class.len() as f64);
    Ok(Metrics {
        accuracy: correct as f64 / rows as f64,
        miou,
        per_class,
        ortho_error: ortho.mean(),
    })
}

/// Mean IoU over `parts`; a part absent from both prediction and truth
/// counts as 1.
pub fn instance_iou(predicted: &[usize], truth: &[usize], parts: std::ops::Range<usize>) -> f64 {
    let n = parts.len();
    let mut total = 0.0;
    for part in parts {
        let inter = predicted.iter().zip(truth).filter(|(p, t)| **p == part && **t == part).count();
        let union = predicted.iter().zip(truth).filter(|(p, t)| **p == part || **t == part).count();
        total += if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    }
    total / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn iou_examples() {
        assert_eq!(instance_iou(&[2, 3, 3], &[2, 3, 3], 2..4), 1.0);
        assert_eq!(instance_iou(&[2, 2, 2], &[2, 2, 2], 2..4), 1.0);
        // part 2: 1/2, part 3: 1/2
        assert_eq!(instance_iou(&[2, 2, 3], &[2, 3, 3], 2..4), 0.5);
    }

    #[test]
    fn argmax_takes_first_maximum() {
        let t = Tensor::from_rows(&[vec![1.0, 3.0, 3.0], vec![-1.0, -2.0, -0.5]]);
        assert_eq!(argmax_rows(&t), vec![1, 2]);
        assert_eq!(argmax_rows_in(&t, |_| 0..2), vec![1, 0]);
    }

    #[test]
    fn csv_row_leaves_missing_test_fields_empty() {
        let r = EpochRecord {
            epoch: 1,
            lr: 0.5,
            train_loss: 2.0,
            ortho_loss: 0.0,
            train_accuracy: 0.25,
            ortho_error: 0.0,
            test: None,
        };
        assert_eq!(r.csv_row(), "1,0.5,2,0,0.25,0,,");
        assert_eq!(EpochRecord::CSV_HEADER.split(',').count(), r.csv_row().split(',').count());
    }
}
