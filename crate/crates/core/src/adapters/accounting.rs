use serde::{Deserialize, Serialize};

use super::{AdapterConfig, AdapterKind};
use crate::error::{Error, Result};

/// Trainable scalar counts by role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub down: u64,
    pub up: u64,
    pub router: u64,
    pub total: u64,
}

fn mul(factors: &[usize]) -> Result<u64> {
    factors.iter().try_fold(1u64, |acc, &f| {
        acc.checked_mul(f as u64)
            .ok_or_else(|| Error::Overflow(format!("parameter count {factors:?} exceeds u64")))
    })
}

/// Closed-form parameter counts.
///
/// | family    | down      | up          | router        |
/// |-----------|-----------|-------------|---------------|
/// | LoRA      | `P r`     | `Q r`       | 0             |
/// | MoLoRA    | `m P r`   | `m Q r`     | `P m`         |
/// | MoLoRA-SD | `P r`     | `m Q r`     | `P m`         |
/// | MoDE      | `P r`     | `m Q r`     | `(r/p) P m`   |
pub fn param_count(kind: AdapterKind, config: &AdapterConfig) -> Result<ParamBreakdown> {
    config.validate()?;
    let AdapterConfig {
        input_dim: p_in,
        output_dim: q_out,
        lora_rank: r,
        num_experts: m,
        ..
    } = *config;
    let g = config.groups();
    let (down, up, router) = match kind {
        AdapterKind::Lora => (mul(&[p_in, r])?, mul(&[q_out, r])?, 0),
        AdapterKind::MoLora => (mul(&[m, p_in, r])?, mul(&[m, q_out, r])?, mul(&[p_in, m])?),
        AdapterKind::MoLoraSd => (mul(&[p_in, r])?, mul(&[m, q_out, r])?, mul(&[p_in, m])?),
        AdapterKind::Mode => (mul(&[p_in, r])?, mul(&[m, q_out, r])?, mul(&[g, p_in, m])?),
    };
    let total = down
        .checked_add(up)
        .and_then(|t| t.checked_add(router))
        .ok_or_else(|| Error::Overflow("parameter total exceeds u64".into()))?;
    Ok(ParamBreakdown {
        down,
        up,
        router,
        total,
    })
}

/// Number of distinct hard routing assignments, `m^(r/p)`.
pub fn enumerate_compositions(config: &AdapterConfig) -> Result<u128> {
    config.validate()?;
    let g = u32::try_from(config.groups()).map_err(|_| Error::Overflow("group count exceeds u32".into()))?;
    (config.num_experts as u128).checked_pow(g).ok_or_else(|| {
        Error::Overflow(format!(
            "{}^{} compositions exceed u128",
            config.num_experts,
            config.groups()
        ))
    })
}
