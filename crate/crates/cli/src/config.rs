//! Experiment configuration files: a single versioned JSON document carrying
//! the backbone, the task suite, the mode list and per-mode training
//! settings. Unknown keys anywhere are hard errors and everything validates
//! before any compute starts.

use adapterlab::adapters::AdapterConfig;
use adapterlab::backbone::{BackboneConfig, MlmTrainConfig};
use adapterlab::error::{Error, Result};
use adapterlab::fusion::FusionConfig;
use adapterlab::tasks::SuiteConfig;
use adapterlab::training::TrainConfig;
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    HeadOnly,
    Full,
    StAdapter,
    MtAdapters,
    FusionSt,
    FusionMt,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::HeadOnly => "head_only",
            Mode::Full => "full",
            Mode::StAdapter => "st_adapter",
            Mode::MtAdapters => "mt_adapters",
            Mode::FusionSt => "fusion_st",
            Mode::FusionMt => "fusion_mt",
        }
    }

    /// Table column order.
    pub fn all() -> [Mode; 6] {
        [Mode::HeadOnly, Mode::Full, Mode::StAdapter, Mode::MtAdapters, Mode::FusionSt, Mode::FusionMt]
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default)]
    pub mlm: MlmTrainConfig,
    #[serde(default = "default_adapter_tc")]
    pub adapter: TrainConfig,
    /// joint training updates the backbone too, so it gets its own settings
    #[serde(default = "default_adapter_tc")]
    pub mt: TrainConfig,
    #[serde(default = "default_fusion_tc")]
    pub fusion: TrainConfig,
    #[serde(default = "default_baseline_tc")]
    pub baseline: TrainConfig,
}

fn default_adapter_tc() -> TrainConfig {
    TrainConfig::adapter_defaults(0)
}

fn default_fusion_tc() -> TrainConfig {
    TrainConfig::fusion_defaults(0)
}

fn default_baseline_tc() -> TrainConfig {
    TrainConfig::baseline_defaults(0)
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            mlm: MlmTrainConfig::default(),
            adapter: default_adapter_tc(),
            mt: default_adapter_tc(),
            fusion: default_fusion_tc(),
            baseline: default_baseline_tc(),
        }
    }
}

/// The whole experiment: data, model, modes, training settings and seeds.
/// The `seed` field inside each TrainConfig is overridden by the run seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub backbone: BackboneConfig,
    pub suite: SuiteConfig,
    /// data generation seed, fixed across the training seed set
    #[serde(default)]
    pub suite_seed: u64,
    pub modes: Vec<Mode>,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default = "default_adapter_cfg")]
    pub adapter: AdapterConfig,
    #[serde(default)]
    pub fusion: FusionConfig,
    /// member adapters composed in stage 2; empty means every suite task
    #[serde(default)]
    pub fusion_members: Vec<String>,
    /// stage-2 target tasks; empty means every suite task
    #[serde(default)]
    pub fusion_targets: Vec<String>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// default artifact directory; the --out flag overrides it
    #[serde(default)]
    pub output_dir: Option<std::path::PathBuf>,
}

fn default_adapter_cfg() -> AdapterConfig {
    AdapterConfig::pfeiffer(16)
}

/// mid-epoch evaluation cadence for large tasks: check the dev set every
/// 40 steps so early stopping can fire before an epoch boundary
pub(crate) fn steps_cadence() -> adapterlab::training::EvalCadence {
    adapterlab::training::EvalCadence::Steps(40)
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}

impl ExperimentConfig {
    /// Laptop-scale default: the standard six-task suite over the toy
    /// backbone with all six table columns and three seeds. Training rates
    /// are tuned for the miniature model (the literature defaults the
    /// TrainConfig constructors carry converge too slowly at this scale).
    pub fn default_toy() -> ExperimentConfig {
        let backbone = BackboneConfig::toy();
        let suite = SuiteConfig::default_suite(backbone.vocab_size, 16);
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            suite_seed: 7,
            modes: Mode::all().to_vec(),
            train: TrainSection {
                mlm: MlmTrainConfig { steps: 600, batch_size: 16, base_lr: 2e-3, ..Default::default() },
                adapter: TrainConfig {
                    base_lr: 1e-2,
                    batch_size: 32,
                    max_epochs: 45,
                    early_stop_patience: 4,
                    eval_every: crate::config::steps_cadence(),
                    schedule: adapterlab::optim::Schedule::Constant,
                    ..TrainConfig::adapter_defaults(0)
                },
                mt: TrainConfig {
                    base_lr: 2e-3,
                    batch_size: 32,
                    max_epochs: 3,
                    early_stop_patience: 4,
                    eval_every: crate::config::steps_cadence(),
                    schedule: adapterlab::optim::Schedule::Constant,
                    ..TrainConfig::adapter_defaults(0)
                },
                fusion: TrainConfig {
                    base_lr: 3e-3,
                    batch_size: 32,
                    max_epochs: 20,
                    early_stop_patience: 3,
                    eval_every: crate::config::steps_cadence(),
                    schedule: adapterlab::optim::Schedule::Constant,
                    ..TrainConfig::fusion_defaults(0)
                },
                baseline: TrainConfig {
                    base_lr: 3e-3,
                    batch_size: 32,
                    max_epochs: 25,
                    early_stop_patience: 4,
                    eval_every: crate::config::steps_cadence(),
                    schedule: adapterlab::optim::Schedule::Constant,
                    ..TrainConfig::baseline_defaults(0)
                },
            },
            adapter: AdapterConfig::pfeiffer(16),
            fusion: FusionConfig::default(),
            fusion_members: Vec::new(),
            fusion_targets: Vec::new(),
            seeds: default_seeds(),
            output_dir: None,
            backbone,
            suite,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version: expected {SCHEMA_VERSION}, found {}",
                self.schema_version
            )));
        }
        self.backbone.validate().map_err(prefix("backbone"))?;
        self.adapter.validate(&self.backbone).map_err(prefix("adapter"))?;
        self.train.adapter.validate().map_err(prefix("train.adapter"))?;
        self.train.mt.validate().map_err(prefix("train.mt"))?;
        self.train.fusion.validate().map_err(prefix("train.fusion"))?;
        self.train.baseline.validate().map_err(prefix("train.baseline"))?;
        if self.modes.is_empty() {
            return Err(Error::Config("modes: at least one mode is required".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds: at least one seed is required".into()));
        }
        if self.suite.vocab_size != self.backbone.vocab_size {
            return Err(Error::Config(format!(
                "suite.vocab_size {} does not match backbone.vocab_size {}",
                self.suite.vocab_size, self.backbone.vocab_size
            )));
        }
        if self.suite.max_seq_len > self.backbone.max_seq_len {
            return Err(Error::Config(format!(
                "suite.max_seq_len {} exceeds backbone.max_seq_len {}",
                self.suite.max_seq_len, self.backbone.max_seq_len
            )));
        }
        let task_names: Vec<&str> = self.suite.tasks.iter().map(|t| t.name.as_str()).collect();
        for name in self.fusion_members.iter().chain(&self.fusion_targets) {
            if !task_names.contains(&name.as_str()) {
                return Err(Error::Config(format!(
                    "fusion member/target {name} is not a suite task"
                )));
            }
        }
        let needs_mta = self.modes.contains(&Mode::MtAdapters) || self.modes.contains(&Mode::FusionMt);
        if needs_mta && self.suite.tasks.len() < 2 {
            return Err(Error::Config("mt modes require at least 2 suite tasks".into()));
        }
        Ok(())
    }

    /// Stage-2 member task names (default: every suite task, suite order).
    pub fn member_names(&self) -> Vec<String> {
        if self.fusion_members.is_empty() {
            self.suite.tasks.iter().map(|t| t.name.clone()).collect()
        } else {
            self.fusion_members.clone()
        }
    }

    pub fn target_names(&self) -> Vec<String> {
        if self.fusion_targets.is_empty() {
            self.suite.tasks.iter().map(|t| t.name.clone()).collect()
        } else {
            self.fusion_targets.clone()
        }
    }
}

fn prefix(field: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Config(msg) => Error::Config(format!("{field}: {msg}")),
        other => other,
    }
}

pub fn load_experiment(path: &std::path::Path) -> Result<ExperimentConfig> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let cfg: ExperimentConfig = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_toy_validates() {
        ExperimentConfig::default_toy().validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v = serde_json::to_value(ExperimentConfig::default_toy()).unwrap();
        v["surprise"] = serde_json::json!(1);
        let err = serde_json::from_value::<ExperimentConfig>(v);
        assert!(err.is_err());
        assert!(err.unwrap_err().to_string().contains("surprise"));
    }

    #[test]
    fn nested_unknown_keys_are_rejected_with_field_path() {
        let mut v = serde_json::to_value(ExperimentConfig::default_toy()).unwrap();
        v["backbone"]["novel_field"] = serde_json::json!(2);
        let err = serde_json::from_value::<ExperimentConfig>(v).unwrap_err();
        assert!(err.to_string().contains("novel_field"), "{err}");
    }

    #[test]
    fn schema_version_checked() {
        let mut cfg = ExperimentConfig::default_toy();
        cfg.schema_version = 9;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn fusion_member_names_must_exist() {
        let mut cfg = ExperimentConfig::default_toy();
        cfg.fusion_members = vec!["missing-task".into()];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn shipped_example_configs_stay_valid() {
        let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        load_experiment(&root.join("toy.json")).unwrap();
        crate::grid::load_grid(&root.join("grid-full.json")).unwrap();
        crate::grid::load_grid(&root.join("grid-small.json")).unwrap();
    }
}
