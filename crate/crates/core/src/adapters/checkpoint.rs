use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Adapter, AdapterConfig, AdapterKind, LoraAdapter, ModeAdapter, ModeGroup, MoLoraAdapter, MoLoraSdAdapter};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// JSON checkpoint of an adapter.
///
/// Numbers are written in shortest round-trip form and parsed with correct
/// rounding, so save/load is lossless for every finite `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub kind: AdapterKind,
    pub config: AdapterConfig,
    pub matrices: BTreeMap<String, Matrix>,
    pub seed: u64,
    pub step: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl Checkpoint {
    pub fn from_adapter(adapter: &Adapter, seed: u64, step: u64) -> Self {
        Self {
            kind: adapter.kind(),
            config: adapter.config(),
            matrices: adapter
                .named_params()
                .into_iter()
                .map(|(name, p)| (name, p.value.clone()))
                .collect(),
            seed,
            step,
            label: None,
        }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    /// Rebuilds the adapter, checking that exactly the expected matrices are
    /// present with the expected shapes.
    pub fn to_adapter(&self) -> Result<Adapter> {
        let mut adapter = super::init_adapter(self.kind, &self.config, 0)?;
        let names: Vec<String> = adapter.named_params().into_iter().map(|(n, _)| n).collect();
        if names.len() != self.matrices.len() {
            return Err(Error::config(format!(
                "checkpoint holds {} matrices, {} {:?} expects {}",
                self.matrices.len(),
                self.kind,
                self.config,
                names.len()
            )));
        }
        let values = names
            .iter()
            .map(|n| {
                self.matrices
                    .get(n)
                    .cloned()
                    .ok_or_else(|| Error::config(format!("checkpoint is missing matrix `{n}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        adapter.set_params(&values)?;
        Ok(adapter)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

impl From<LoraAdapter> for Adapter {
    fn from(a: LoraAdapter) -> Self {
        Adapter::Lora(a)
    }
}

impl From<MoLoraAdapter> for Adapter {
    fn from(a: MoLoraAdapter) -> Self {
        Adapter::MoLora(a)
    }
}

impl From<MoLoraSdAdapter> for Adapter {
    fn from(a: MoLoraSdAdapter) -> Self {
        Adapter::MoLoraSd(a)
    }
}

impl From<ModeAdapter> for Adapter {
    fn from(a: ModeAdapter) -> Self {
        Adapter::Mode(a)
    }
}

impl ModeAdapter {
    /// The routing group layout as `(expert count, expert rank)`.
    pub fn layout(&self) -> (usize, usize) {
        let g: &ModeGroup = &self.groups[0];
        (g.experts.len(), g.experts[0].cols())
    }
}
