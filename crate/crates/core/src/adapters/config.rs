use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Adapter family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterKind {
    /// Single low-rank update `A Bᵀ`.
    Lora,
    /// `m` full LoRA experts mixed by one softmax router.
    #[serde(rename = "molora", alias = "lora_moe")]
    MoLora,
    /// `m` up-projection experts sharing one down-projection.
    #[serde(rename = "molora_sd", alias = "molora-sd", alias = "lora_moe_sd")]
    MoLoraSd,
    /// Shared down-projection with `r/p` independently routed groups of
    /// rank-`p` up-projection experts.
    Mode,
}

impl AdapterKind {
    pub const ALL: [AdapterKind; 4] = [
        AdapterKind::Lora,
        AdapterKind::MoLora,
        AdapterKind::MoLoraSd,
        AdapterKind::Mode,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AdapterKind::Lora => "lora",
            AdapterKind::MoLora => "molora",
            AdapterKind::MoLoraSd => "molora_sd",
            AdapterKind::Mode => "mode",
        }
    }
}

impl fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AdapterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "lora" => Ok(AdapterKind::Lora),
            "molora" | "lora_moe" => Ok(AdapterKind::MoLora),
            "molora_sd" | "lora_moe_sd" => Ok(AdapterKind::MoLoraSd),
            "mode" => Ok(AdapterKind::Mode),
            other => Err(Error::config(format!("unknown adapter kind `{other}`"))),
        }
    }
}

/// Shape hyperparameters shared by every adapter family.
///
/// `num_experts` defaults to 1 and `expert_rank` to `lora_rank` when absent
/// from JSON; the short names `P`, `Q`, `r`, `m`, `p` are accepted as aliases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawAdapterConfig")]
pub struct AdapterConfig {
    pub input_dim: usize,
    pub output_dim: usize,
    pub lora_rank: usize,
    pub num_experts: usize,
    pub expert_rank: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAdapterConfig {
    #[serde(alias = "P")]
    input_dim: usize,
    #[serde(alias = "Q")]
    output_dim: usize,
    #[serde(alias = "r")]
    lora_rank: usize,
    #[serde(alias = "m", default = "one")]
    num_experts: usize,
    #[serde(alias = "p", default)]
    expert_rank: Option<usize>,
}

fn one() -> usize {
    1
}

impl TryFrom<RawAdapterConfig> for AdapterConfig {
    type Error = Error;

    fn try_from(raw: RawAdapterConfig) -> Result<Self> {
        let cfg = AdapterConfig {
            input_dim: raw.input_dim,
            output_dim: raw.output_dim,
            lora_rank: raw.lora_rank,
            num_experts: raw.num_experts,
            expert_rank: raw.expert_rank.unwrap_or(raw.lora_rank),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl AdapterConfig {
    pub fn new(input_dim: usize, output_dim: usize, lora_rank: usize, num_experts: usize, expert_rank: usize) -> Result<Self> {
        let cfg = Self {
            input_dim,
            output_dim,
            lora_rank,
            num_experts,
            expert_rank,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Plain LoRA shape (`m = 1`, `p = r`).
    pub fn lora(input_dim: usize, output_dim: usize, lora_rank: usize) -> Result<Self> {
        Self::new(input_dim, output_dim, lora_rank, 1, lora_rank)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("input_dim", self.input_dim),
            ("output_dim", self.output_dim),
            ("lora_rank", self.lora_rank),
            ("num_experts", self.num_experts),
            ("expert_rank", self.expert_rank),
        ] {
            if v == 0 {
                return Err(Error::config(format!("`{name}` must be positive")));
            }
        }
        if !self.lora_rank.is_multiple_of(self.expert_rank) {
            return Err(Error::config(format!(
                "`lora_rank` ({}) must be divisible by `expert_rank` ({})",
                self.lora_rank, self.expert_rank
            )));
        }
        Ok(())
    }

    /// Number of routed rank groups, `r / p`.
    pub fn groups(&self) -> usize {
        self.lora_rank / self.expert_rank
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn divisibility_enforced() {
        assert!(AdapterConfig::new(8, 8, 4, 2, 3).is_err());
        assert!(AdapterConfig::new(8, 8, 4, 2, 2).is_ok());
        assert!(AdapterConfig::new(8, 8, 4, 0, 1).is_err());
    }

    #[test]
    fn json_defaults_and_aliases() {
        let c: AdapterConfig = serde_json::from_str(r#"{"P":4,"Q":3,"r":2}"#).unwrap();
        assert_eq!(c, AdapterConfig::new(4, 3, 2, 1, 2).unwrap());
        let c: AdapterConfig =
            serde_json::from_str(r#"{"input_dim":4,"output_dim":3,"lora_rank":4,"num_experts":3,"expert_rank":1}"#)
                .unwrap();
        assert_eq!(c.groups(), 4);
    }

    #[test]
    fn json_missing_field_is_named() {
        let err = serde_json::from_str::<AdapterConfig>(r#"{"input_dim":4,"output_dim":3}"#).unwrap_err();
        assert!(err.to_string().contains("lora_rank"), "{err}");
    }

    #[test]
    fn json_invalid_divisibility() {
        let err =
            serde_json::from_str::<AdapterConfig>(r#"{"P":4,"Q":3,"r":4,"p":3}"#).unwrap_err();
        assert!(err.to_string().contains("expert_rank"), "{err}");
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("MoLoRA-SD".parse::<AdapterKind>().unwrap(), AdapterKind::MoLoraSd);
        assert!("moe".parse::<AdapterKind>().is_err());
        let k: AdapterKind = serde_json::from_str("\"molora_sd\"").unwrap();
        assert_eq!(k, AdapterKind::MoLoraSd);
    }
}
