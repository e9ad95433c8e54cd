//! Flat, typed experiment configs in TOML with `include` support.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::FixMatchCmConfig;
use crate::bilevel::{NeumannConfig, PhaseTrigger, SecondStepConfig, SecondStepMode, ThresholdConfig};
use crate::datamodel::{
    generate_synthetic_msda, load_manifest, load_multi_domain_dataset, LayoutSpec, MultiDomainDataset, ShiftKind,
    SyntheticShiftConfig,
};
use crate::error::{Error, Result};
use crate::first_step::{AdaptationLossPlugin, LabelingNet, Step1Config};
use crate::nn::{Activation, BackboneSpec};
use crate::optim::{LrSchedule, SgdConfig};
use crate::pseudolabel::ThresholdMode;

/// Annotated defaults, suitable as a starting config file.
pub const DEFAULT_CONFIG_TOML: &str = include_str!("default_config.toml");

const MAX_INCLUDE_DEPTH: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// First step only.
    None,
    Naive,
    RobustNoBilevel,
    RobustFull,
}

impl RunMode {
    pub const ALL: [RunMode; 4] = [RunMode::RobustFull, RunMode::RobustNoBilevel, RunMode::Naive, RunMode::None];

    pub fn second_step(self) -> Option<SecondStepMode> {
        match self {
            RunMode::None => None,
            RunMode::Naive => Some(SecondStepMode::Naive),
            RunMode::RobustNoBilevel => Some(SecondStepMode::RobustNoBilevel),
            RunMode::RobustFull => Some(SecondStepMode::RobustFull),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RunMode::None => "none",
            RunMode::Naive => "naive",
            RunMode::RobustNoBilevel => "robust_no_bilevel",
            RunMode::RobustFull => "robust_full",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Synthetic,
    /// `data_root/<domain>/<class>/<file>`.
    Directory,
    /// Line-delimited manifest at `data_root`.
    Manifest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Mlp,
    Conv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PluginKind {
    Zero,
    MomentMatching,
    FixmatchCm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerKind {
    Converged,
    FixedEpochs,
}

/// Every knob of one experiment. All keys live at the top level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub mode: RunMode,
    /// Save a second-step checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,

    // dataset
    pub dataset: DatasetKind,
    pub data_root: Option<PathBuf>,
    pub target_domain: Option<String>,
    pub resize: Option<[u32; 2]>,
    pub grayscale: bool,
    /// Fraction of labeled target data moved to the test split when the
    /// dataset has no separate test set.
    pub target_test_fraction: f64,
    pub num_classes: usize,
    pub num_sources: usize,
    pub samples_per_domain: usize,
    pub target_test_samples: usize,
    pub input_dim: usize,
    pub shift_kind: ShiftKind,
    pub shift_magnitudes: Vec<f64>,
    pub class_radius: f64,
    pub class_std: f64,
    pub ambient_std: f64,
    pub label_noise_rate: f64,

    // backbone
    pub backbone: BackboneKind,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub conv_channels: [usize; 3],
    pub feature_dim: usize,

    // first step
    pub plugin: PluginKind,
    pub moment_weight: f64,
    pub fixmatch_tau0: f64,
    pub cutmix: bool,
    pub mixstyle: bool,
    pub mixstyle_prob: f64,
    pub mixstyle_alpha: f64,
    pub weak_jitter: f64,
    pub step1_epochs: usize,
    pub step1_batch_size: usize,
    pub step1_lr: f64,
    pub step1_momentum: f64,
    pub step1_weight_decay: f64,
    pub step1_schedule: ScheduleKind,
    pub step1_max_batches: Option<usize>,

    // second step
    pub step2_epochs: usize,
    pub step2_batch_size: usize,
    pub step2_lr: f64,
    pub step2_momentum: f64,
    pub step2_weight_decay: f64,
    pub step2_schedule: ScheduleKind,
    pub step2_max_batches: Option<usize>,
    pub lambda: f64,
    pub margin: f64,
    pub threshold_mode: ThresholdMode,
    pub tau0: f64,
    pub alpha: f64,
    pub neumann_terms: usize,
    pub neumann_eta: f64,
    pub neumann_damping: f64,
    pub outer_lr: f64,
    pub inner_steps_per_outer: usize,
    pub trigger: TriggerKind,
    pub trigger_window: usize,
    pub trigger_rel_tol: f64,
    pub trigger_epochs: usize,
    pub gumbel_temperature: f64,
    pub straight_through: bool,
    pub held_out_val: Option<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let synth = SyntheticShiftConfig::default();
        let s1 = Step1Config::default();
        let s2 = SecondStepConfig::default();
        let fm = FixMatchCmConfig::default();
        Self {
            name: "experiment".into(),
            output_dir: PathBuf::from("runs"),
            seeds: vec![0],
            mode: RunMode::RobustFull,
            checkpoint_every: 1,
            dataset: DatasetKind::Synthetic,
            data_root: None,
            target_domain: None,
            resize: None,
            grayscale: false,
            target_test_fraction: 0.2,
            num_classes: synth.num_classes,
            num_sources: synth.num_source_domains,
            samples_per_domain: synth.samples_per_domain,
            target_test_samples: synth.target_test_samples,
            input_dim: synth.input_dim,
            shift_kind: synth.shift_kind,
            shift_magnitudes: synth.shift_magnitudes,
            class_radius: synth.class_radius,
            class_std: synth.class_std,
            ambient_std: synth.ambient_std,
            label_noise_rate: synth.label_noise_rate,
            backbone: BackboneKind::Mlp,
            hidden: vec![32, 16],
            activation: Activation::Tanh,
            conv_channels: [16, 32, 64],
            feature_dim: 128,
            plugin: PluginKind::Zero,
            moment_weight: 1.0,
            fixmatch_tau0: fm.tau0,
            cutmix: fm.cutmix,
            mixstyle: fm.mixstyle,
            mixstyle_prob: fm.mixstyle_prob,
            mixstyle_alpha: fm.mixstyle_alpha,
            weak_jitter: fm.weak_jitter,
            step1_epochs: s1.epochs,
            step1_batch_size: s1.batch_size,
            step1_lr: s1.sgd.lr,
            step1_momentum: s1.sgd.momentum,
            step1_weight_decay: s1.sgd.weight_decay,
            step1_schedule: ScheduleKind::Cosine,
            step1_max_batches: None,
            step2_epochs: s2.epochs,
            step2_batch_size: s2.batch_size,
            step2_lr: s2.sgd.lr,
            step2_momentum: s2.sgd.momentum,
            step2_weight_decay: s2.sgd.weight_decay,
            step2_schedule: ScheduleKind::Cosine,
            step2_max_batches: None,
            lambda: s2.lambda,
            margin: s2.margin,
            threshold_mode: s2.threshold.mode,
            tau0: s2.threshold.tau,
            alpha: s2.threshold.alpha,
            neumann_terms: s2.neumann.num_terms,
            neumann_eta: s2.neumann.eta,
            neumann_damping: s2.neumann.damping,
            outer_lr: s2.outer_lr,
            inner_steps_per_outer: s2.inner_steps_per_outer,
            trigger: TriggerKind::Converged,
            trigger_window: 5,
            trigger_rel_tol: 1e-3,
            trigger_epochs: 10,
            gumbel_temperature: s2.gumbel_temperature,
            straight_through: s2.straight_through,
            held_out_val: s2.held_out_val,
        }
    }
}

fn schedule(kind: ScheduleKind) -> LrSchedule {
    match kind {
        ScheduleKind::Constant => LrSchedule::Constant,
        ScheduleKind::Cosine => LrSchedule::Cosine { total_steps: 0 },
    }
}

/// Reads `path` into a table with its includes merged underneath it.
/// Later includes override earlier ones and the including file overrides
/// all of them.
fn load_table(path: &Path, depth: usize) -> Result<toml::Table> {
    if depth > MAX_INCLUDE_DEPTH {
        return Err(Error::config(format!("include depth exceeds {MAX_INCLUDE_DEPTH} at {}", path.display())));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::Read {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut own: toml::Table = text
        .parse()
        .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    let includes = match own.remove("include") {
        None => Vec::new(),
        Some(toml::Value::String(s)) => vec![s],
        Some(toml::Value::Array(a)) => a
            .into_iter()
            .map(|v| match v {
                toml::Value::String(s) => Ok(s),
                _ => Err(Error::config("`include` entries must be strings")),
            })
            .collect::<Result<_>>()?,
        Some(_) => return Err(Error::config("`include` must be a string or an array of strings")),
    };
    let base = path.parent().unwrap_or(Path::new("."));
    let mut merged = toml::Table::new();
    for inc in includes {
        merged.extend(load_table(&base.join(inc), depth + 1)?);
    }
    merged.extend(own);
    Ok(merged)
}

/// Parses a `key=value` override. The value is read as TOML, falling back
/// to a bare string.
pub fn parse_override(kv: &str) -> Result<(String, toml::Value)> {
    let (k, v) = kv
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{kv}` is not key=value")))?;
    let k = k.trim().to_string();
    let v = v.trim();
    let value = format!("x = {v}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("x"))
        .unwrap_or_else(|| toml::Value::String(v.to_string()));
    Ok((k, value))
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::load_with_overrides(path, &[])
    }

    /// Loads `path` (with includes) and applies `key=value` overrides.
    pub fn load_with_overrides(path: &Path, overrides: &[String]) -> Result<Self> {
        let mut table = load_table(path, 0)?;
        for o in overrides {
            let (k, v) = parse_override(o)?;
            table.insert(k, v);
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key=value` overrides to an in-memory config.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut table = toml::Table::try_from(self).map_err(|e| Error::config(e.to_string()))?;
        for o in overrides {
            let (k, v) = parse_override(o)?;
            table.insert(k, v);
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    /// SHA-256 of the canonical JSON form, hex-encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("need at least one seed"));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::config("name must be non-empty and contain no path separators"));
        }
        if self.dataset != DatasetKind::Synthetic && (self.data_root.is_none() || self.target_domain.is_none()) {
            return Err(Error::config("on-disk datasets need `data_root` and `target_domain`"));
        }
        if !(0.0..1.0).contains(&self.target_test_fraction) {
            return Err(Error::config("target_test_fraction must lie in [0, 1)"));
        }
        self.synthetic_config(0).validate()?;
        self.step1_config(0).validate()?;
        self.step2_config(0).validate()?;
        Ok(())
    }

    pub fn synthetic_config(&self, seed: u64) -> SyntheticShiftConfig {
        SyntheticShiftConfig {
            num_classes: self.num_classes,
            num_source_domains: self.num_sources,
            samples_per_domain: self.samples_per_domain,
            target_test_samples: self.target_test_samples,
            input_dim: self.input_dim,
            shift_kind: self.shift_kind,
            shift_magnitudes: self.shift_magnitudes.clone(),
            class_radius: self.class_radius,
            class_std: self.class_std,
            ambient_std: self.ambient_std,
            label_noise_rate: self.label_noise_rate,
            seed,
        }
    }

    /// Builds the dataset for `seed`. On-disk data ignores the seed except
    /// for the target test split.
    pub fn load_dataset(&self, seed: u64) -> Result<MultiDomainDataset> {
        let mut ds = match self.dataset {
            DatasetKind::Synthetic => return generate_synthetic_msda(&self.synthetic_config(seed)),
            DatasetKind::Directory | DatasetKind::Manifest => {
                let layout = LayoutSpec {
                    target_domain: self.target_domain.clone().unwrap_or_default(),
                    resize: self.resize.map(|[w, h]| (w, h)),
                    grayscale: self.grayscale,
                };
                let root = self.data_root.as_deref().unwrap_or(Path::new("."));
                if self.dataset == DatasetKind::Directory {
                    load_multi_domain_dataset(root, &layout)?
                } else {
                    load_manifest(root, &layout)?
                }
            }
        };
        if ds.target_test().is_none() && ds.target_train_eval_set().is_some() && self.target_test_fraction > 0.0 {
            ds.hold_out_target_test(self.target_test_fraction, seed)?;
        }
        Ok(ds)
    }

    pub fn backbone_spec(&self, dataset: &MultiDomainDataset) -> BackboneSpec {
        let shape = dataset.shape();
        match self.backbone {
            BackboneKind::Mlp => BackboneSpec::Mlp {
                input_dim: shape.len(),
                hidden: self.hidden.clone(),
                activation: self.activation,
            },
            BackboneKind::Conv => BackboneSpec::Conv {
                channels: shape.channels,
                height: shape.height,
                width: shape.width,
                conv_channels: self.conv_channels,
                feature_dim: self.feature_dim,
                activation: self.activation,
            },
        }
    }

    pub fn labeling_net(&self, dataset: &MultiDomainDataset) -> Result<LabelingNet> {
        LabelingNet::new(self.backbone_spec(dataset), dataset.num_classes())
    }

    pub fn plugin(&self) -> AdaptationLossPlugin {
        match self.plugin {
            PluginKind::Zero => AdaptationLossPlugin::Zero,
            PluginKind::MomentMatching => AdaptationLossPlugin::MomentMatching {
                weight: self.moment_weight,
            },
            PluginKind::FixmatchCm => AdaptationLossPlugin::FixMatchCm(FixMatchCmConfig {
                tau0: self.fixmatch_tau0,
                cutmix: self.cutmix,
                mixstyle: self.mixstyle,
                mixstyle_prob: self.mixstyle_prob,
                mixstyle_alpha: self.mixstyle_alpha,
                target_terms: true,
                weak_jitter: self.weak_jitter,
            }),
        }
    }

    pub fn step1_config(&self, seed: u64) -> Step1Config {
        Step1Config {
            epochs: self.step1_epochs,
            batch_size: self.step1_batch_size,
            sgd: SgdConfig {
                lr: self.step1_lr,
                momentum: self.step1_momentum,
                weight_decay: self.step1_weight_decay,
                schedule: schedule(self.step1_schedule),
            },
            seed,
            max_batches_per_epoch: self.step1_max_batches,
        }
    }

    pub fn step2_config(&self, seed: u64) -> SecondStepConfig {
        SecondStepConfig {
            mode: self.mode.second_step().unwrap_or(SecondStepMode::RobustFull),
            epochs: self.step2_epochs,
            batch_size: self.step2_batch_size,
            sgd: SgdConfig {
                lr: self.step2_lr,
                momentum: self.step2_momentum,
                weight_decay: self.step2_weight_decay,
                schedule: schedule(self.step2_schedule),
            },
            lambda: self.lambda,
            margin: self.margin,
            threshold: ThresholdConfig {
                mode: self.threshold_mode,
                tau: self.tau0,
                alpha: self.alpha,
            },
            neumann: NeumannConfig {
                num_terms: self.neumann_terms,
                eta: self.neumann_eta,
                damping: self.neumann_damping,
            },
            outer_lr: self.outer_lr,
            inner_steps_per_outer: self.inner_steps_per_outer,
            trigger: match self.trigger {
                TriggerKind::Converged => PhaseTrigger::Converged {
                    window: self.trigger_window,
                    rel_tol: self.trigger_rel_tol,
                },
                TriggerKind::FixedEpochs => PhaseTrigger::FixedEpochs {
                    epochs: self.trigger_epochs,
                },
            },
            gumbel_temperature: self.gumbel_temperature,
            straight_through: self.straight_through,
            held_out_val: self.held_out_val,
            seed,
            max_batches_per_epoch: self.step2_max_batches,
        }
    }

    /// Directory of one seed's run.
    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.experiment_dir().join(format!("seed-{seed}"))
    }

    pub fn experiment_dir(&self) -> PathBuf {
        self.output_dir.join(&self.name)
    }

    /// The four ablation rows, full model first.
    pub fn ablation(&self) -> Vec<ExperimentConfig> {
        RunMode::ALL
            .iter()
            .map(|&mode| ExperimentConfig {
                name: format!("{}-{}", self.name, mode.name()),
                mode,
                ..self.clone()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_file_matches_struct_defaults() {
        let parsed = ExperimentConfig::from_toml_str(DEFAULT_CONFIG_TOML).unwrap();
        assert_eq!(parsed, ExperimentConfig::default());
    }

    #[test]
    fn include_is_overridden_by_includer() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("base.toml"), "lambda = 0.5\nmargin = 8.0\n").unwrap();
        std::fs::write(dir.path().join("run.toml"), "include = \"base.toml\"\nlambda = 0.25\n").unwrap();
        let cfg = ExperimentConfig::load(&dir.path().join("run.toml")).unwrap();
        assert_eq!(cfg.lambda, 0.25);
        assert_eq!(cfg.margin, 8.0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml_str("lamda = 0.1").is_err());
    }

    #[test]
    fn overrides_are_typed() {
        let cfg = ExperimentConfig::default()
            .with_overrides(&["mode=naive".into(), "lambda=1".into(), "seeds=[1, 2]".into()])
            .unwrap();
        assert_eq!(cfg.mode, RunMode::Naive);
        assert_eq!(cfg.lambda, 1.0);
        assert_eq!(cfg.seeds, vec![1, 2]);
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.margin = 5.0;
        assert_ne!(a.hash(), b.hash());
    }
}
