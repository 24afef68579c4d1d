//! Experiment configuration files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mode_core::adapters::{AdapterConfig, AdapterKind};
use mode_core::seed::derive_seed;
use mode_core::synthbench::SynthSpec;
use mode_core::training::TrainConfig;

use crate::error::{CliError, CliResult};

/// One adapter to train.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub kind: AdapterKind,
    pub config: AdapterConfig,
}

impl Variant {
    /// Stable label derived from the architecture alone, used for seeding.
    /// Two variants with the same kind and shape share it.
    pub fn canonical_label(&self) -> String {
        let c = &self.config;
        format!(
            "{}_P{}_Q{}_r{}_m{}_p{}",
            self.kind, c.input_dim, c.output_dim, c.lora_rank, c.num_experts, c.expert_rank
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub synth: SynthSpec,
    /// Adapter for `train`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter: Option<Variant>,
    /// Adapters for `compare`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub variants: Vec<Variant>,
    #[serde(default)]
    pub train: TrainConfig,
    /// Train on one task (0-based) instead of the full mixture.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    /// Denominator for percentage reporting; defaults to `P * Q`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backbone_nonembedding: Option<u64>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> CliResult<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn backbone(&self) -> u64 {
        self.backbone_nonembedding
            .unwrap_or((self.synth.input_dim * self.synth.output_dim) as u64)
    }

    /// Synthetic suite spec with its seed derived from the master seed.
    pub fn seeded_synth(&self) -> SynthSpec {
        SynthSpec {
            seed: derive_seed(self.seed, "synth"),
            ..self.synth.clone()
        }
    }

    pub fn init_seed(&self, variant: &Variant) -> u64 {
        derive_seed(self.seed, &format!("init/{}", variant.canonical_label()))
    }

    pub fn train_seed(&self, variant: &Variant, task: Option<usize>) -> u64 {
        let scope = task.map_or_else(|| "mixture".to_string(), |t| format!("task_{t}"));
        derive_seed(self.seed, &format!("train/{}/{scope}", variant.canonical_label()))
    }

    pub fn validate_common(&self) -> CliResult<()> {
        self.synth.validate()?;
        self.train.validate()?;
        if self.backbone_nonembedding == Some(0) {
            return Err(CliError::Config("`backbone_nonembedding` must be positive".into()));
        }
        if let Some(t) = self.task {
            if t >= self.synth.num_tasks {
                return Err(CliError::Config(format!(
                    "`task` {t} out of range for {} tasks",
                    self.synth.num_tasks
                )));
            }
        }
        for v in self.adapter.iter().chain(&self.variants) {
            v.config.validate()?;
            let c = &v.config;
            if (c.input_dim, c.output_dim) != (self.synth.input_dim, self.synth.output_dim) {
                return Err(CliError::Config(format!(
                    "variant `{}` has dims {}x{} but the synthetic suite is {}x{}",
                    v.canonical_label(),
                    c.input_dim,
                    c.output_dim,
                    self.synth.input_dim,
                    self.synth.output_dim
                )));
            }
        }
        Ok(())
    }

    pub fn out_dir(&self, override_dir: Option<&Path>) -> CliResult<PathBuf> {
        override_dir
            .map(Path::to_path_buf)
            .or_else(|| self.out_dir.clone())
            .ok_or_else(|| CliError::Config("no output directory: set `out_dir` or pass --out".into()))
    }
}
