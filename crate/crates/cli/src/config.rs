//! Experiment configuration: one TOML file fully determines an experiment.
//! The schema is strict; unknown keys are rejected at parse time.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context};
use serde::Deserialize;

use segtta_core::adapter::ParamScope;
use segtta_core::corruptions::CorruptionKind;
use segtta_core::tta::{LossKind, Method, TTAConfig};

/// Environment variable overriding the configured output directory.
pub const OUTPUT_ROOT_ENV: &str = "SEGTTA_OUTPUT_ROOT";

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: ModelSection,
    pub dataset: DatasetSection,
    #[serde(default)]
    pub corruptions: CorruptionsSection,
    #[serde(default)]
    pub aux: AuxSection,
    #[serde(default)]
    pub adapt: Option<AdaptSection>,
    #[serde(default)]
    pub grid: Option<GridSection>,
    #[serde(default)]
    pub train: TrainSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub arch: String,
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub root: PathBuf,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionsSection {
    #[serde(default = "default_kinds")]
    pub kinds: Vec<String>,
    #[serde(default = "default_levels")]
    pub levels: Vec<u8>,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl Default for CorruptionsSection {
    fn default() -> Self {
        CorruptionsSection {
            kinds: default_kinds(),
            levels: default_levels(),
            seed: None,
        }
    }
}

/// Nine corruption kinds plus the identity; together with three levels this
/// derives 30 entries per source image.
fn default_kinds() -> Vec<String> {
    [
        "brightness",
        "contrast",
        "frost",
        "fog",
        "gaussian-noise",
        "shot-noise",
        "spatter",
        "defocus-blur",
        "jpeg",
        "identity",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn default_levels() -> Vec<u8> {
    vec![1, 3, 5]
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuxSection {
    #[serde(default)]
    pub refiner: Option<PathBuf>,
    #[serde(default)]
    pub diou: Option<PathBuf>,
    /// Source images used for pair generation (dataset prefix).
    #[serde(default = "default_aux_images")]
    pub train_images: usize,
    #[serde(default = "default_attack_steps")]
    pub attack_steps: usize,
    #[serde(default = "default_attack_step_size")]
    pub attack_step_size: f64,
    #[serde(default = "default_harvest")]
    pub harvest: Vec<usize>,
    #[serde(default = "default_target_kind")]
    pub target_kind: String,
    #[serde(default = "default_aux_epochs")]
    pub epochs: usize,
    #[serde(default = "default_aux_lr")]
    pub lr: f64,
}

impl Default for AuxSection {
    fn default() -> Self {
        AuxSection {
            refiner: None,
            diou: None,
            train_images: default_aux_images(),
            attack_steps: default_attack_steps(),
            attack_step_size: default_attack_step_size(),
            harvest: default_harvest(),
            target_kind: default_target_kind(),
            epochs: default_aux_epochs(),
            lr: default_aux_lr(),
        }
    }
}

fn default_aux_images() -> usize {
    24
}
fn default_attack_steps() -> usize {
    10
}
fn default_attack_step_size() -> f64 {
    1.0 / 255.0
}
fn default_harvest() -> Vec<usize> {
    segtta_core::auxnets::DEFAULT_HARVEST.to_vec()
}
fn default_target_kind() -> String {
    "predictions".to_string()
}
fn default_aux_epochs() -> usize {
    12
}
fn default_aux_lr() -> f64 {
    1e-3
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptSection {
    pub method: String,
    pub loss: String,
    pub scope: String,
    pub lr: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub methods: Vec<String>,
    #[serde(default = "default_grid_losses")]
    pub losses: Vec<String>,
    #[serde(default = "default_grid_scopes")]
    pub scopes: Vec<String>,
    pub lrs: Vec<f64>,
    #[serde(default = "default_grid_iterations")]
    pub iterations: usize,
}

fn default_grid_losses() -> Vec<String> {
    vec!["ce".to_string(), "iou".to_string()]
}
fn default_grid_scopes() -> Vec<String> {
    vec!["full".to_string(), "norm".to_string()]
}
fn default_grid_iterations() -> usize {
    10
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_train_epochs")]
    pub epochs: usize,
    #[serde(default = "default_train_lr")]
    pub lr: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: default_train_epochs(),
            lr: default_train_lr(),
        }
    }
}

fn default_train_epochs() -> usize {
    8
}
fn default_train_lr() -> f64 {
    1e-3
}

impl ExperimentConfig {
    /// Parse and schema-validate; parse failures carry line/column info.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let mut config: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| anyhow::anyhow!("invalid config {}:\n{e}", path.display()))?;
        if let Ok(root) = std::env::var(OUTPUT_ROOT_ENV) {
            if !root.is_empty() {
                config.output_dir = PathBuf::from(root);
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        for kind in &self.corruptions.kinds {
            CorruptionKind::from_str(kind)
                .map_err(|e| anyhow::anyhow!("corruptions.kinds: {e}"))?;
        }
        for level in &self.corruptions.levels {
            if ![1u8, 3, 5].contains(level) {
                bail!("corruptions.levels: level {level} outside {{1, 3, 5}}");
            }
        }
        if self.aux.target_kind != "predictions" && self.aux.target_kind != "ground-truth" {
            bail!(
                "aux.target_kind must be `predictions` or `ground-truth`, got `{}`",
                self.aux.target_kind
            );
        }
        if let Some(adapt) = &self.adapt {
            adapt.to_tta_config(self.seed)?;
        }
        if let Some(grid) = &self.grid {
            if grid.methods.is_empty() || grid.lrs.is_empty() {
                bail!("grid.methods and grid.lrs must be non-empty");
            }
            self.grid_configs()?;
        }
        Ok(())
    }

    pub fn corruption_kinds(&self) -> Vec<CorruptionKind> {
        self.corruptions
            .kinds
            .iter()
            .map(|k| CorruptionKind::from_str(k).expect("validated"))
            .collect()
    }

    pub fn corruption_seed(&self) -> u64 {
        self.corruptions.seed.unwrap_or(self.seed)
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.output_dir.join("corpus")
    }

    pub fn results_jsonl(&self) -> PathBuf {
        self.output_dir.join("results.jsonl")
    }

    pub fn results_csv(&self) -> PathBuf {
        self.output_dir.join("results.csv")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.output_dir.join("report")
    }

    pub fn target_kind(&self) -> segtta_core::auxnets::TargetKind {
        match self.aux.target_kind.as_str() {
            "ground-truth" => segtta_core::auxnets::TargetKind::GroundTruth,
            _ => segtta_core::auxnets::TargetKind::Predictions,
        }
    }

    /// Expand the grid section into validated configurations. Methods with a
    /// fixed loss (entropy, adversarial, estimator) ignore the loss list.
    pub fn grid_configs(&self) -> anyhow::Result<Vec<TTAConfig>> {
        let grid = self
            .grid
            .as_ref()
            .ok_or_else(|| anyhow::anyhow!("config has no [grid] section"))?;
        let mut configs = Vec::new();
        let losses: Vec<LossKind> = grid
            .losses
            .iter()
            .map(|l| LossKind::from_str(l).map_err(|e| anyhow::anyhow!("grid.losses: {e}")))
            .collect::<anyhow::Result<_>>()?;
        let scopes: Vec<ParamScope> = grid
            .scopes
            .iter()
            .map(|s| ParamScope::from_str(s).map_err(|e| anyhow::anyhow!("grid.scopes: {e}")))
            .collect::<anyhow::Result<_>>()?;
        for method_name in &grid.methods {
            let method =
                Method::from_str(method_name).map_err(|e| anyhow::anyhow!("grid.methods: {e}"))?;
            let method_losses: Vec<LossKind> = match method {
                Method::Ent | Method::Adv | Method::Diou => method.valid_losses().to_vec(),
                _ => losses
                    .iter()
                    .filter(|l| method.valid_losses().contains(l))
                    .copied()
                    .collect(),
            };
            if method_losses.is_empty() {
                bail!("grid: no valid loss for method {method} among {:?}", grid.losses);
            }
            for loss in &method_losses {
                for scope in &scopes {
                    for lr in &grid.lrs {
                        let mut cfg =
                            TTAConfig::new(method, *loss, *scope, *lr, grid.iterations);
                        cfg.seed = self.seed;
                        cfg.validate().map_err(|e| anyhow::anyhow!("grid: {e}"))?;
                        configs.push(cfg);
                    }
                }
            }
        }
        Ok(configs)
    }
}

impl AdaptSection {
    pub fn to_tta_config(&self, seed: u64) -> anyhow::Result<TTAConfig> {
        let mut cfg = TTAConfig::new(
            Method::from_str(&self.method).map_err(|e| anyhow::anyhow!("adapt.method: {e}"))?,
            LossKind::from_str(&self.loss).map_err(|e| anyhow::anyhow!("adapt.loss: {e}"))?,
            ParamScope::from_str(&self.scope).map_err(|e| anyhow::anyhow!("adapt.scope: {e}"))?,
            self.lr,
            self.iterations,
        );
        cfg.seed = seed;
        cfg.validate().map_err(|e| anyhow::anyhow!("adapt: {e}"))?;
        Ok(cfg)
    }
}
