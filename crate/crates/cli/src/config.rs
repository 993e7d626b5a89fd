use std::path::{Path, PathBuf};

use alignconv::data::{AugmentationSpec, Dataset, Preprocessing, RotationMode, Split, SynthSpec, PARTS_PER_CLASS};
use alignconv::network::{ArchitectureSpec, Task, Variant};
use alignconv::train::TrainOptions;
use alignconv::verify::AuditConfig;
use alignconv::{Error, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// 16 → 256 channels, first grid 0.15.
    Toy,
    /// 64 → 1024 channels, first grid 0.02.
    Full,
}

/// Every setting of a run. Architecture keys left unset take the value of
/// the chosen profile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub profile: Profile,
    pub variant: Variant,

    pub train_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    pub synth_train_per_class: usize,
    pub synth_test_per_class: usize,
    pub synth_points: usize,
    pub synth_seed: u64,
    /// Rotation baked into the generated clouds.
    pub synth_rotation: RotationMode,
    pub height_feature: bool,

    pub grid_size: Option<f64>,
    pub radius_ratio: Option<f64>,
    pub sigma_ratio: Option<f64>,
    pub kernel_points: usize,
    /// Frame count J; must match `lrf_scales` when given.
    pub frames: Option<usize>,
    pub omega: f64,
    pub lrf_scales: Vec<usize>,
    /// Width of the first block; later blocks keep the profile's ratios.
    pub channels: Option<usize>,
    pub neighbor_cap: Option<usize>,
    pub head_hidden: Option<usize>,

    pub lr: f64,
    pub momentum: f64,
    pub lr_decay: f64,
    /// 0 disables clipping.
    pub clip_norm: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub recalibrate_bn: bool,
    pub train_rotation: RotationMode,
    pub train_jitter: f64,
    pub test_rotation: RotationMode,

    pub out_dir: PathBuf,

    pub audit_rotations: usize,
    pub audit_inputs: usize,
    pub audit_clouds: usize,
    pub audit_network_rotations: usize,

    pub variants: Vec<Variant>,
    /// Optional ω sweep run with the full variant.
    pub omegas: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainOptions::default();
        Self {
            task: Task::Classify,
            profile: Profile::Toy,
            variant: Variant::Full,
            train_manifest: None,
            test_manifest: None,
            synth_train_per_class: 50,
            synth_test_per_class: 25,
            synth_points: 1024,
            synth_seed: 0,
            synth_rotation: RotationMode::None,
            height_feature: false,
            grid_size: None,
            radius_ratio: None,
            sigma_ratio: None,
            kernel_points: alignconv::conv::DEFAULT_KERNEL_COUNT,
            frames: None,
            omega: alignconv::layers::DEFAULT_OMEGA,
            lrf_scales: alignconv::lrf::DEFAULT_LRF_SCALES.to_vec(),
            channels: None,
            neighbor_cap: None,
            head_hidden: None,
            lr: t.lr,
            momentum: t.momentum,
            lr_decay: t.lr_decay,
            clip_norm: t.clip_norm.unwrap_or(0.0),
            epochs: t.epochs,
            batch: t.batch_size,
            seed: 0,
            recalibrate_bn: t.recalibrate_bn,
            train_rotation: RotationMode::None,
            train_jitter: 0.0,
            test_rotation: RotationMode::None,
            out_dir: PathBuf::from("runs"),
            audit_rotations: 32,
            audit_inputs: 20,
            audit_clouds: 16,
            audit_network_rotations: 4,
            variants: Variant::ABLATIONS.to_vec(),
            omegas: Vec::new(),
        }
    }
}

/// Command-line overrides, one flag per configuration key.
#[derive(Args, Clone, Debug, Default, Serialize)]
#[command(rename_all = "snake_case")]
pub struct Overrides {
    /// classify or segment
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    task: Option<String>,
    /// toy or full; fills unset architecture keys
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    profile: Option<String>,
    /// full, no-merge, one-local, one-global or standard
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    variant: Option<String>,
    /// Text file listing training XYZ files
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    train_manifest: Option<PathBuf>,
    /// Text file listing test XYZ files
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    test_manifest: Option<PathBuf>,
    /// Synthetic training clouds per class
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    synth_train_per_class: Option<usize>,
    /// Synthetic test clouds per class
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    synth_test_per_class: Option<usize>,
    /// Points per synthetic cloud
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    synth_points: Option<usize>,
    /// Synthetic data seed (the test set uses seed + 1)
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    synth_seed: Option<u64>,
    /// Rotation applied to synthetic clouds: none, z or so3
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    synth_rotation: Option<String>,
    /// Append the height coordinate as an input feature
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    height_feature: Option<bool>,
    /// First-level subsampling cell size
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    grid_size: Option<f64>,
    /// Convolution radius in grid cells
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    radius_ratio: Option<f64>,
    /// Kernel influence relative to the convolution radius
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    sigma_ratio: Option<f64>,
    /// Kernel points per convolution
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    kernel_points: Option<usize>,
    /// Number of local frames J (must match lrf_scales)
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    frames: Option<usize>,
    /// Orthonormalization loss weight
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    omega: Option<f64>,
    /// Neighborhood sizes of the J PCA frames, comma separated
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    lrf_scales: Option<Vec<usize>>,
    /// Width of the first block
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    channels: Option<usize>,
    /// Neighbors kept per query (0 keeps all)
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    neighbor_cap: Option<usize>,
    /// Hidden width of the output head
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    head_hidden: Option<usize>,
    /// SGD learning rate
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    lr: Option<f64>,
    /// SGD momentum
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    momentum: Option<f64>,
    /// Learning-rate factor per epoch
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    lr_decay: Option<f64>,
    /// Global gradient-norm clip (0 disables)
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    clip_norm: Option<f64>,
    /// Training epochs
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    epochs: Option<usize>,
    /// Clouds per batch
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    batch: Option<usize>,
    /// Model and shuffling seed
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    /// Recompute batch-norm statistics after each epoch
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    recalibrate_bn: Option<bool>,
    /// Training augmentation rotation: none, z or so3
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    train_rotation: Option<String>,
    /// Training augmentation jitter std
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    train_jitter: Option<f64>,
    /// Rotation of test clouds during training: none, z or so3
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    test_rotation: Option<String>,
    /// Output directory
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out_dir: Option<PathBuf>,
    /// Rotations per input in the audits
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    audit_rotations: Option<usize>,
    /// Random inputs per audit
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    audit_inputs: Option<usize>,
    /// Test clouds in the network invariance audit
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    audit_clouds: Option<usize>,
    /// Rotations per cloud in the network audit
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    audit_network_rotations: Option<usize>,
    /// Ablation variants, comma separated
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    variants: Option<Vec<String>>,
    /// Orthonormalization weights for the sweep, comma separated
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    omegas: Option<Vec<f64>>,
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl RunConfig {
    /// Reads `path` (when given), applies `overrides` key by key and
    /// validates the result.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        let extra = toml::Table::try_from(overrides).map_err(config_err)?;
        table.extend(extra);
        let cfg = RunConfig::deserialize(toml::Value::Table(table)).map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(j) = self.frames {
            if j != self.lrf_scales.len() {
                return Err(Error::Config(format!(
                    "frames = {j} but lrf_scales has {} entries",
                    self.lrf_scales.len()
                )));
            }
        }
        if self.train_manifest.is_none() != self.test_manifest.is_none() {
            return Err(Error::Config("train_manifest and test_manifest go together".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.variants.is_empty() {
            return Err(Error::Config("variants must not be empty".into()));
        }
        if self.omegas.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config("omegas must be nonnegative".into()));
        }
        self.train_options().validate()
    }

    pub fn preprocessing(&self) -> Preprocessing {
        Preprocessing {
            height_feature: self.height_feature,
            ..Preprocessing::new(self.grid())
        }
    }

    fn base_spec(&self) -> ArchitectureSpec {
        match self.profile {
            Profile::Toy => ArchitectureSpec::toy_classifier(1),
            Profile::Full => ArchitectureSpec::default_classifier(1),
        }
    }

    pub fn grid(&self) -> f64 {
        self.grid_size.unwrap_or_else(|| self.base_spec().grid_size)
    }

    /// Output width of the network for a dataset with `classes` object
    /// classes.
    pub fn outputs(&self, classes: usize) -> usize {
        match self.task {
            Task::Classify => classes,
            Task::Segment => classes * PARTS_PER_CLASS,
        }
    }

    pub fn architecture(&self, classes: usize) -> Result<ArchitectureSpec> {
        let base = self.base_spec();
        let first = base.blocks[0].out;
        let mut spec = ArchitectureSpec {
            task: self.task,
            variant: self.variant,
            classes: self.outputs(classes),
            in_features: self.preprocessing().feature_count(),
            grid_size: self.grid(),
            radius_ratio: self.radius_ratio.unwrap_or(base.radius_ratio),
            sigma_ratio: self.sigma_ratio.unwrap_or(base.sigma_ratio),
            kernel_points: self.kernel_points,
            lrf_scales: self.lrf_scales.clone(),
            omega: self.omega,
            neighbor_cap: self.neighbor_cap.unwrap_or(base.neighbor_cap),
            head_hidden: self.head_hidden.unwrap_or(base.head_hidden),
            ..base
        };
        if let Some(c) = self.channels {
            for b in &mut spec.blocks {
                b.out = b.out / first * c;
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            lr: self.lr,
            momentum: self.momentum,
            lr_decay: self.lr_decay,
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
            epochs: self.epochs,
            batch_size: self.batch,
            seed: self.seed,
            augmentation: AugmentationSpec {
                rotation: self.train_rotation,
                jitter: self.train_jitter,
                ..AugmentationSpec::identity()
            },
            recalibrate_bn: self.recalibrate_bn,
        }
    }

    pub fn audit_config(&self) -> AuditConfig {
        AuditConfig {
            rotations: self.audit_rotations,
            inputs: self.audit_inputs,
            seed: self.seed,
        }
    }

    fn synth(&self, per_class: usize, seed: u64, split: Split) -> SynthSpec {
        SynthSpec {
            rotation: self.synth_rotation,
            split,
            ..SynthSpec::new(per_class, self.synth_points, seed)
        }
    }

    /// Raw train and test sets: the manifests when given, otherwise
    /// synthetic shapes (test seed one above the train seed).
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        match (&self.train_manifest, &self.test_manifest) {
            (Some(tr), Some(te)) => {
                let train = Dataset::from_manifest(tr, Split::Train)?;
                let mut test = Dataset::from_manifest(te, Split::Test)?;
                if test.class_count > train.class_count {
                    return Err(Error::Config(format!(
                        "test set has {} classes, train set {}",
                        test.class_count, train.class_count
                    )));
                }
                test.class_count = train.class_count;
                Ok((train, test))
            }
            _ => Ok((
                self.synth(self.synth_train_per_class, self.synth_seed, Split::Train).generate()?,
                self.synth(self.synth_test_per_class, self.synth_seed + 1, Split::Test).generate()?,
            )),
        }
    }

    pub fn test_set(&self) -> Result<Dataset> {
        match &self.test_manifest {
            Some(te) => Dataset::from_manifest(te, Split::Test),
            None => self.synth(self.synth_test_per_class, self.synth_seed + 1, Split::Test).generate(),
        }
    }
}
