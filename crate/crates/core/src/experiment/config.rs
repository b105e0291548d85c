//! Experiment configuration: a sectioned `key = value` file (TOML syntax).
//!
//! ```toml
//! [model]
//! arch = "toy"            # built-in name or path to an architecture file
//! cut_layer = 3
//!
//! [schedule]
//! clients = 4
//! sampled = 4
//! batch = 10
//! epochs = 5
//! syncs_per_epoch = 10
//!
//! [training]
//! scheme = "momentum-aligned"
//! lr = 0.06
//!
//! [run]
//! seeds = [0, 1, 2]
//! ```
//!
//! Every key is optional; omitted keys take the defaults shown by
//! [`ExperimentConfig::default`]. Unknown keys are rejected. Any key can be
//! overridden with `section.key=value`, where the value uses the same
//! syntax as in the file (bare words are read as strings).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arch::ArchitectureSpec;
use crate::data::{generate_synthetic, load_idx, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::eval::{AttackConfig, ProbeConfig};
use crate::moco::{AugmentationConfig, MocoConfig};
use crate::nn::SgdConfig;
use crate::protocol::{Schedule, SyncScheme, TrainingConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub arch: String,
    pub cut_layer: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            arch: "toy".into(),
            cut_layer: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub clients: usize,
    pub sampled: usize,
    pub batch: usize,
    pub epochs: usize,
    pub syncs_per_epoch: usize,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            clients: 4,
            sampled: 4,
            batch: 10,
            epochs: 5,
            syncs_per_epoch: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub scheme: SyncScheme,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay_projector: bool,
    pub reset_velocity_on_sync: bool,
    pub parallel_clients: bool,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            scheme: SyncScheme::MomentumAligned,
            lr: 0.06,
            momentum: 0.9,
            weight_decay: 5e-4,
            decay_projector: true,
            reset_velocity_on_sync: false,
            parallel_clients: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MocoSection {
    pub tau: f64,
    pub ema_momentum: f64,
    pub queue_capacity: usize,
}

impl Default for MocoSection {
    fn default() -> Self {
        Self {
            tau: 0.2,
            ema_momentum: 0.99,
            queue_capacity: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    pub crop_padding: usize,
    pub flip_probability: f64,
    pub noise_sigma: f64,
    pub scale_jitter: f64,
}

impl Default for AugmentSection {
    fn default() -> Self {
        let a = AugmentationConfig::default();
        Self {
            crop_padding: a.crop_padding,
            flip_probability: a.flip_probability as f64,
            noise_sigma: a.noise_sigma as f64,
            scale_jitter: a.scale_jitter as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    /// Synthetic generator settings.
    pub classes: usize,
    pub per_class: usize,
    pub val_per_class: usize,
    pub shape: [usize; 3],
    pub noise: f64,
    pub seed: u64,
    /// IDX files, used when `source = "idx"`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_labels: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_labels: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            classes: 8,
            per_class: 250,
            val_per_class: 50,
            shape: [1, 16, 16],
            noise: 0.3,
            seed: 1,
            train_images: None,
            train_labels: None,
            val_images: None,
            val_labels: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionSection {
    pub classes_per_client: usize,
    pub seed: u64,
}

impl Default for PartitionSection {
    fn default() -> Self {
        Self {
            classes_per_client: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// k-NN evaluation every this many epochs; 0 disables it. The final
    /// epoch is always evaluated when enabled.
    pub knn_every: usize,
    pub knn_k: usize,
    pub probe: bool,
    pub probe_epochs: usize,
    pub probe_batch: usize,
    pub probe_lr: f64,
    pub attack: bool,
    pub attack_fraction: f64,
    pub attack_epochs: usize,
    pub attack_batch: usize,
    pub attack_lr: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        let p = ProbeConfig::default();
        let a = AttackConfig::default();
        Self {
            knn_every: 1,
            knn_k: 20,
            probe: false,
            probe_epochs: p.epochs,
            probe_batch: p.batch,
            probe_lr: p.lr as f64,
            attack: false,
            attack_fraction: 0.25,
            attack_epochs: a.epochs,
            attack_batch: a.batch,
            attack_lr: a.lr as f64,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// Empty means `[model.cut_layer]`.
    pub cut_layers: Vec<usize>,
    /// Empty means `[training.scheme]`.
    pub schemes: Vec<SyncScheme>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub name: String,
    pub seeds: Vec<u64>,
    /// Output root; `SPLITMOCO_OUT` or `--out` take precedence.
    pub output: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            seeds: vec![0],
            output: PathBuf::from("runs"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub schedule: ScheduleSection,
    pub training: TrainingSection,
    pub moco: MocoSection,
    pub augment: AugmentSection,
    pub data: DataSection,
    pub partition: PartitionSection,
    pub eval: EvalSection,
    pub sweep: SweepSection,
    pub run: RunSection,
}

fn toml_error(e: toml::de::Error, text: &str) -> Error {
    let (line, column) = e
        .span()
        .map(|s| {
            let before = &text[..s.start.min(text.len())];
            let line = before.matches('\n').count() + 1;
            let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
            (line, column)
        })
        .unwrap_or((0, 0));
    Error::Parse {
        line,
        column,
        message: e.message().to_string(),
    }
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form section.key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = path.split_last().unwrap();
    let mut cursor = table;
    for p in parents {
        cursor = cursor
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a section")))?;
    }
    cursor.insert(last.to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    /// Parses configuration text, applies overrides, and validates.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| toml_error(e, text))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let config: ExperimentConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().trim().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut config = Self::parse(&text, overrides).map_err(|e| match e {
            Error::Parse { line, column, message } => Error::Parse {
                line,
                column,
                message: format!("{}: {message}", path.display()),
            },
            other => other,
        })?;
        // Relative paths in the file are relative to the file.
        if let Some(dir) = path.parent() {
            config.resolve_paths(dir);
        }
        Ok(config)
    }

    fn resolve_paths(&mut self, dir: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(x) = p {
                if x.is_relative() {
                    *x = dir.join(&*x);
                }
            }
        };
        fix(&mut self.data.train_images);
        fix(&mut self.data.train_labels);
        fix(&mut self.data.val_images);
        fix(&mut self.data.val_labels);
        if !self.model.arch.is_empty() && ArchitectureSpec::builtin(&self.model.arch).is_none() {
            let p = PathBuf::from(&self.model.arch);
            if p.is_relative() {
                self.model.arch = dir.join(p).to_string_lossy().into_owned();
            }
        }
    }

    /// The resolved configuration in file syntax.
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Hex SHA-256 of [`Self::to_text`].
    pub fn hash(&self) -> String {
        format!("{:x}", Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn architecture(&self) -> Result<ArchitectureSpec> {
        resolve_arch(&self.model.arch).map_err(|e| match e {
            Error::Parse { .. } => e,
            other => Error::Config(format!("model.arch: {}", strip_prefix(&other))),
        })
    }

    pub fn cut_layers(&self) -> Vec<usize> {
        if self.sweep.cut_layers.is_empty() {
            vec![self.model.cut_layer]
        } else {
            self.sweep.cut_layers.clone()
        }
    }

    pub fn schemes(&self) -> Vec<SyncScheme> {
        if self.sweep.schemes.is_empty() {
            vec![self.training.scheme]
        } else {
            self.sweep.schemes.clone()
        }
    }

    /// Checks everything that can be checked before loading data.
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Config(format!("{field}: {msg}")));
        let spec = self.architecture()?;
        if let Err(e) = spec.check_cut(self.model.cut_layer) {
            return bad("model.cut_layer", strip_prefix(&e));
        }
        for &c in &self.sweep.cut_layers {
            if let Err(e) = spec.check_cut(c) {
                return bad("sweep.cut_layers", strip_prefix(&e));
            }
        }
        let s = &self.schedule;
        if s.clients == 0 {
            return bad("schedule.clients", "must be at least 1".into());
        }
        if s.sampled == 0 || s.sampled > s.clients {
            return bad("schedule.sampled", format!("must lie in 1..={}, got {}", s.clients, s.sampled));
        }
        if s.batch == 0 {
            return bad("schedule.batch", "must be at least 1".into());
        }
        let t = &self.training;
        if !(t.lr >= 0.0 && t.lr.is_finite()) {
            return bad("training.lr", format!("must be a finite non-negative rate, got {}", t.lr));
        }
        if !(0.0..1.0).contains(&t.momentum) {
            return bad("training.momentum", format!("must lie in [0, 1), got {}", t.momentum));
        }
        if !(t.weight_decay >= 0.0 && t.weight_decay.is_finite()) {
            return bad("training.weight_decay", format!("must be non-negative, got {}", t.weight_decay));
        }
        self.moco_config(&spec)?.validate()?;
        self.augmentation().validate()?;
        let d = &self.data;
        match d.source {
            DataSource::Synthetic => {
                if d.classes == 0 {
                    return bad("data.classes", "must be at least 1".into());
                }
                if d.per_class == 0 {
                    return bad("data.per_class", "must be at least 1".into());
                }
                if d.val_per_class == 0 {
                    return bad("data.val_per_class", "must be at least 1".into());
                }
                if d.shape.contains(&0) {
                    return bad("data.shape", "extents must be positive".into());
                }
                if d.shape != spec.input_shape() {
                    return bad(
                        "data.shape",
                        format!("{:?} does not match the architecture input {:?}", d.shape, spec.input_shape()),
                    );
                }
                if !(d.noise >= 0.0 && d.noise.is_finite()) {
                    return bad("data.noise", format!("must be non-negative, got {}", d.noise));
                }
                let cpc = self.partition.classes_per_client;
                if cpc == 0 || cpc > d.classes {
                    return bad(
                        "partition.classes_per_client",
                        format!("must lie in 1..={}, got {cpc}", d.classes),
                    );
                }
            }
            DataSource::Idx => {
                for (name, p) in [
                    ("data.train_images", &d.train_images),
                    ("data.train_labels", &d.train_labels),
                    ("data.val_images", &d.val_images),
                    ("data.val_labels", &d.val_labels),
                ] {
                    if p.is_none() {
                        return bad(name, "required when data.source = \"idx\"".into());
                    }
                }
                if self.partition.classes_per_client == 0 {
                    return bad("partition.classes_per_client", "must be at least 1".into());
                }
            }
        }
        let e = &self.eval;
        if e.knn_every > 0 && e.knn_k == 0 {
            return bad("eval.knn_k", "must be at least 1".into());
        }
        if e.probe && (e.probe_epochs == 0 || e.probe_batch == 0) {
            return bad("eval.probe_epochs", "probe epochs and batch must be positive".into());
        }
        if e.attack {
            if !(e.attack_fraction > 0.0 && e.attack_fraction <= 1.0) {
                return bad("eval.attack_fraction", format!("must lie in (0, 1], got {}", e.attack_fraction));
            }
            if e.attack_batch == 0 {
                return bad("eval.attack_batch", "must be at least 1".into());
            }
            if d.source == DataSource::Synthetic {
                let n = d.classes * d.per_class;
                let split = (n as f64 * e.attack_fraction).round() as usize;
                if split < e.attack_batch {
                    return bad(
                        "eval.attack_fraction",
                        format!("attacker split of {split} samples is smaller than one batch of {}", e.attack_batch),
                    );
                }
            }
        }
        if self.run.seeds.is_empty() {
            return bad("run.seeds", "at least one seed is required".into());
        }
        if self.run.name.is_empty() || self.run.name.contains(['/', '\\']) {
            return bad("run.name", format!("`{}` is not a plain directory name", self.run.name));
        }
        Ok(())
    }

    pub fn moco_config(&self, spec: &ArchitectureSpec) -> Result<MocoConfig> {
        let m = MocoConfig {
            tau: self.moco.tau as f32,
            ema_momentum: self.moco.ema_momentum as f32,
            queue_capacity: self.moco.queue_capacity,
            embedding_dim: spec.projector().outputs,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn augmentation(&self) -> AugmentationConfig {
        AugmentationConfig {
            crop_padding: self.augment.crop_padding,
            flip_probability: self.augment.flip_probability as f32,
            noise_sigma: self.augment.noise_sigma as f32,
            scale_jitter: self.augment.scale_jitter as f32,
        }
    }

    pub fn training(&self, spec: &ArchitectureSpec, scheme: SyncScheme) -> Result<TrainingConfig> {
        let s = &self.schedule;
        Ok(TrainingConfig {
            schedule: Schedule {
                clients_total: s.clients,
                clients_sampled: s.sampled,
                client_batch: s.batch,
                syncs_per_epoch: s.syncs_per_epoch,
                epochs: s.epochs,
            },
            scheme,
            lr: self.training.lr as f32,
            sgd: SgdConfig {
                momentum: self.training.momentum as f32,
                weight_decay: self.training.weight_decay as f32,
            },
            decay_projector: self.training.decay_projector,
            reset_velocity_on_sync: self.training.reset_velocity_on_sync,
            moco: self.moco_config(spec)?,
            augment: self.augmentation(),
            parallel_clients: self.training.parallel_clients,
        })
    }

    pub fn probe(&self, seed: u64) -> ProbeConfig {
        ProbeConfig {
            epochs: self.eval.probe_epochs,
            batch: self.eval.probe_batch,
            lr: self.eval.probe_lr as f32,
            seed,
        }
    }

    pub fn attack(&self, seed: u64) -> AttackConfig {
        AttackConfig {
            attacker_fraction: self.eval.attack_fraction,
            epochs: self.eval.attack_epochs,
            batch: self.eval.attack_batch,
            lr: self.eval.attack_lr as f32,
            seed,
        }
    }

    /// Training and validation sets.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let d = &self.data;
        match d.source {
            DataSource::Synthetic => {
                let spec = |per_class| SyntheticSpec {
                    classes: d.classes,
                    per_class,
                    shape: d.shape,
                    noise: d.noise as f32,
                };
                Ok((
                    generate_synthetic(&spec(d.per_class), d.seed)?,
                    generate_synthetic(&spec(d.val_per_class), d.seed.wrapping_add(1))?,
                ))
            }
            DataSource::Idx => {
                let p = |x: &Option<PathBuf>| x.clone().expect("validated");
                let train = load_idx(p(&d.train_images), p(&d.train_labels))?;
                let val = load_idx(p(&d.val_images), p(&d.val_labels))?;
                let spec = self.architecture()?;
                if train.sample_shape() != spec.input_shape() || val.sample_shape() != spec.input_shape() {
                    return Err(Error::Config(format!(
                        "data: image shape {:?} does not match the architecture input {:?}",
                        train.sample_shape(),
                        spec.input_shape()
                    )));
                }
                // Both files must agree on the label space.
                let classes = train.class_count.max(val.class_count);
                Ok((
                    Dataset::new(train.images, train.labels, classes)?,
                    Dataset::new(val.images, val.labels, classes)?,
                ))
            }
        }
    }
}

/// Built-in architecture name or path to an architecture file.
pub fn resolve_arch(name_or_path: &str) -> Result<ArchitectureSpec> {
    if let Some(spec) = ArchitectureSpec::builtin(name_or_path) {
        return Ok(spec);
    }
    let text = std::fs::read_to_string(name_or_path).map_err(|e| {
        Error::Config(format!(
            "`{name_or_path}` is neither a built-in architecture nor a readable file ({e})"
        ))
    })?;
    ArchitectureSpec::parse(&text).map_err(|e| match e {
        Error::Parse { line, column, message } => Error::Parse {
            line,
            column,
            message: format!("{name_or_path}: {message}"),
        },
        other => other,
    })
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) | Error::Argument(m) => m.clone(),
        other => other.to_string(),
    }
}
