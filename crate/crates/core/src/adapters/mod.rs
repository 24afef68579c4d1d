//! The four adapter families and everything needed to evaluate, count and
//! persist them.
//!
//! All families compute `y = x W0 + Δ(x)` row by row, where `W0 (P x Q)` is
//! frozen and passed in by the caller. Down-projections are `P x r`,
//! up-projections are stored as `Q x r` (or `Q x p` per MoDE block), so that
//! the update of a single expert is `x A Bᵀ`.

mod accounting;
mod checkpoint;
mod config;
mod forward;

pub use accounting::{enumerate_compositions, param_count, ParamBreakdown};
pub use checkpoint::Checkpoint;
pub use config::{AdapterConfig, AdapterKind};
pub use forward::{dyadic_reconstruct, lora_forward, mode_forward, molora_forward, molora_sd_forward, route};

use crate::error::{Error, Result};
use crate::seed::rng_from_seed;
use crate::tensor::{Matrix, Tape, Var};

/// Standard deviation of the Gaussian used for down-projection init.
pub const DOWN_INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    /// `P x r`
    pub down: Matrix,
    /// `Q x r`
    pub up: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoLoraAdapter {
    pub experts: Vec<LoraAdapter>,
    /// `P x m`
    pub router: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoLoraSdAdapter {
    /// `P x r`, shared by every expert.
    pub down: Matrix,
    /// `m` matrices of shape `Q x r`.
    pub ups: Vec<Matrix>,
    /// `P x m`
    pub router: Matrix,
}

/// One routed rank group of a [`ModeAdapter`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModeGroup {
    /// `m` matrices of shape `Q x p`.
    pub experts: Vec<Matrix>,
    /// `P x m`
    pub router: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeAdapter {
    /// `P x r`; group `k` reads columns `k*p .. (k+1)*p`.
    pub down: Matrix,
    pub groups: Vec<ModeGroup>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Adapter {
    Lora(LoraAdapter),
    MoLora(MoLoraAdapter),
    MoLoraSd(MoLoraSdAdapter),
    Mode(ModeAdapter),
}

/// What a trainable matrix does, for accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamRole {
    Down,
    Up,
    Router,
}

#[derive(Debug, Clone, Copy)]
pub struct Param<'a> {
    pub role: ParamRole,
    pub value: &'a Matrix,
}

/// Builds a freshly initialized adapter: down-projections ~ `Normal(0, 0.01²)`,
/// up-projections and routers exactly zero.
pub fn init_adapter(kind: AdapterKind, config: &AdapterConfig, seed: u64) -> Result<Adapter> {
    config.validate()?;
    let AdapterConfig {
        input_dim: p_in,
        output_dim: q_out,
        lora_rank: r,
        num_experts: m,
        expert_rank: p,
    } = *config;
    let mut rng = rng_from_seed(seed);
    let mut down = || Matrix::random_normal(p_in, r, DOWN_INIT_STD, &mut rng);

    Ok(match kind {
        AdapterKind::Lora => Adapter::Lora(LoraAdapter {
            down: down(),
            up: Matrix::zeros(q_out, r),
        }),
        AdapterKind::MoLora => Adapter::MoLora(MoLoraAdapter {
            experts: (0..m)
                .map(|_| LoraAdapter {
                    down: down(),
                    up: Matrix::zeros(q_out, r),
                })
                .collect(),
            router: Matrix::zeros(p_in, m),
        }),
        AdapterKind::MoLoraSd => Adapter::MoLoraSd(MoLoraSdAdapter {
            down: down(),
            ups: (0..m).map(|_| Matrix::zeros(q_out, r)).collect(),
            router: Matrix::zeros(p_in, m),
        }),
        AdapterKind::Mode => Adapter::Mode(ModeAdapter {
            down: down(),
            groups: (0..config.groups())
                .map(|_| ModeGroup {
                    experts: (0..m).map(|_| Matrix::zeros(q_out, p)).collect(),
                    router: Matrix::zeros(p_in, m),
                })
                .collect(),
        }),
    })
}

impl Adapter {
    pub fn kind(&self) -> AdapterKind {
        match self {
            Adapter::Lora(_) => AdapterKind::Lora,
            Adapter::MoLora(_) => AdapterKind::MoLora,
            Adapter::MoLoraSd(_) => AdapterKind::MoLoraSd,
            Adapter::Mode(_) => AdapterKind::Mode,
        }
    }

    /// Config implied by the stored shapes.
    ///
    /// # Panics
    /// If a mixture adapter holds no experts; [`Adapter::validate`] reports
    /// that case as an error instead.
    pub fn config(&self) -> AdapterConfig {
        match self {
            Adapter::Lora(a) => AdapterConfig {
                input_dim: a.down.rows(),
                output_dim: a.up.rows(),
                lora_rank: a.down.cols(),
                num_experts: 1,
                expert_rank: a.down.cols(),
            },
            Adapter::MoLora(a) => {
                let e = &a.experts[0];
                AdapterConfig {
                    input_dim: e.down.rows(),
                    output_dim: e.up.rows(),
                    lora_rank: e.down.cols(),
                    num_experts: a.experts.len(),
                    expert_rank: e.down.cols(),
                }
            }
            Adapter::MoLoraSd(a) => AdapterConfig {
                input_dim: a.down.rows(),
                output_dim: a.ups[0].rows(),
                lora_rank: a.down.cols(),
                num_experts: a.ups.len(),
                expert_rank: a.down.cols(),
            },
            Adapter::Mode(a) => AdapterConfig {
                input_dim: a.down.rows(),
                output_dim: a.groups[0].experts[0].rows(),
                lora_rank: a.down.cols(),
                num_experts: a.groups[0].experts.len(),
                expert_rank: a.groups[0].experts[0].cols(),
            },
        }
    }

    /// Checks every stored matrix against the shapes implied by
    /// [`Adapter::config`].
    pub fn validate(&self) -> Result<()> {
        let empty = match self {
            Adapter::Lora(_) => false,
            Adapter::MoLora(a) => a.experts.is_empty(),
            Adapter::MoLoraSd(a) => a.ups.is_empty(),
            Adapter::Mode(a) => a.groups.first().is_none_or(|g| g.experts.is_empty()),
        };
        if empty {
            return Err(Error::Empty("adapter experts"));
        }
        let cfg = self.config();
        let (p_in, q_out, r, m, p) = (
            cfg.input_dim,
            cfg.output_dim,
            cfg.lora_rank,
            cfg.num_experts,
            cfg.expert_rank,
        );
        let expect = |m: &Matrix, shape: (usize, usize), op: &'static str| -> Result<()> {
            if m.shape() != shape {
                return Err(Error::Shape {
                    op,
                    lhs: shape,
                    rhs: m.shape(),
                });
            }
            Ok(())
        };
        match self {
            Adapter::Lora(a) => {
                expect(&a.down, (p_in, r), "lora down")?;
                expect(&a.up, (q_out, r), "lora up")?;
            }
            Adapter::MoLora(a) => {
                for e in &a.experts {
                    expect(&e.down, (p_in, r), "molora down")?;
                    expect(&e.up, (q_out, r), "molora up")?;
                }
                expect(&a.router, (p_in, m), "molora router")?;
            }
            Adapter::MoLoraSd(a) => {
                for u in &a.ups {
                    expect(u, (q_out, r), "molora_sd up")?;
                }
                expect(&a.router, (p_in, m), "molora_sd router")?;
            }
            Adapter::Mode(a) => {
                cfg.validate()?;
                if a.groups.len() != r / p {
                    return Err(Error::config(format!(
                        "mode adapter has {} groups, expected r/p = {}",
                        a.groups.len(),
                        r / p
                    )));
                }
                for g in &a.groups {
                    if g.experts.len() != m {
                        return Err(Error::config(format!(
                            "mode group has {} experts, expected {m}",
                            g.experts.len()
                        )));
                    }
                    for e in &g.experts {
                        expect(e, (q_out, p), "mode expert")?;
                    }
                    expect(&g.router, (p_in, m), "mode router")?;
                }
            }
        }
        Ok(())
    }

    /// Trainable matrices in canonical order with checkpoint names.
    pub fn named_params(&self) -> Vec<(String, Param<'_>)> {
        let p = |role, value| Param { role, value };
        let mut out = Vec::new();
        match self {
            Adapter::Lora(a) => {
                out.push(("down".to_string(), p(ParamRole::Down, &a.down)));
                out.push(("up".to_string(), p(ParamRole::Up, &a.up)));
            }
            Adapter::MoLora(a) => {
                for (i, e) in a.experts.iter().enumerate() {
                    out.push((format!("experts.{i}.down"), p(ParamRole::Down, &e.down)));
                    out.push((format!("experts.{i}.up"), p(ParamRole::Up, &e.up)));
                }
                out.push(("router".to_string(), p(ParamRole::Router, &a.router)));
            }
            Adapter::MoLoraSd(a) => {
                out.push(("down".to_string(), p(ParamRole::Down, &a.down)));
                for (i, u) in a.ups.iter().enumerate() {
                    out.push((format!("experts.{i}.up"), p(ParamRole::Up, u)));
                }
                out.push(("router".to_string(), p(ParamRole::Router, &a.router)));
            }
            Adapter::Mode(a) => {
                out.push(("down".to_string(), p(ParamRole::Down, &a.down)));
                for (k, g) in a.groups.iter().enumerate() {
                    for (i, e) in g.experts.iter().enumerate() {
                        out.push((format!("groups.{k}.experts.{i}.up"), p(ParamRole::Up, e)));
                    }
                    out.push((format!("groups.{k}.router"), p(ParamRole::Router, &g.router)));
                }
            }
        }
        out
    }

    pub fn params(&self) -> Vec<&Matrix> {
        self.named_params().into_iter().map(|(_, p)| p.value).collect()
    }

    /// Same order as [`Adapter::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = Vec::new();
        match self {
            Adapter::Lora(a) => {
                out.push(&mut a.down);
                out.push(&mut a.up);
            }
            Adapter::MoLora(a) => {
                for e in &mut a.experts {
                    out.push(&mut e.down);
                    out.push(&mut e.up);
                }
                out.push(&mut a.router);
            }
            Adapter::MoLoraSd(a) => {
                out.push(&mut a.down);
                out.extend(a.ups.iter_mut());
                out.push(&mut a.router);
            }
            Adapter::Mode(a) => {
                out.push(&mut a.down);
                for g in &mut a.groups {
                    out.extend(g.experts.iter_mut());
                    out.push(&mut g.router);
                }
            }
        }
        out
    }

    /// Overwrites every trainable matrix, in canonical order.
    pub fn set_params(&mut self, values: &[Matrix]) -> Result<()> {
        let mut slots = self.params_mut();
        if slots.len() != values.len() {
            return Err(Error::config(format!(
                "expected {} parameter matrices, got {}",
                slots.len(),
                values.len()
            )));
        }
        for (slot, v) in slots.iter_mut().zip(values) {
            if slot.shape() != v.shape() {
                return Err(Error::Shape {
                    op: "set_params",
                    lhs: slot.shape(),
                    rhs: v.shape(),
                });
            }
            **slot = v.clone();
        }
        Ok(())
    }

    /// Number of trainable scalars actually stored.
    pub fn scalar_count(&self) -> u64 {
        self.params().iter().map(|m| m.len() as u64).sum()
    }

    /// `x W0 + Δ(x)` for a batch of rows.
    pub fn forward(&self, x: &Matrix, w0: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(w0.clone());
        let (y, _) = self.forward_graph(&mut tape, xv, wv, false)?;
        Ok(tape.value(y).clone())
    }

    /// Records the forward pass on `tape`. Parameters are registered as
    /// trainable leaves when `trainable` is set, and returned in canonical
    /// order alongside the output.
    pub fn forward_graph(&self, tape: &mut Tape, x: Var, w0: Var, trainable: bool) -> Result<(Var, Vec<Var>)> {
        self.validate()?;
        let cfg = self.config();
        forward::check_io(tape.value(x), tape.value(w0), &cfg)?;
        let leaves: Vec<Var> = self
            .params()
            .into_iter()
            .map(|m| {
                if trainable {
                    tape.param(m.clone())
                } else {
                    tape.constant(m.clone())
                }
            })
            .collect();
        let base = tape.matmul(x, w0)?;
        let delta = forward::delta_graph(self, tape, x, &leaves)?;
        let y = tape.add(base, delta)?;
        Ok((y, leaves))
    }
}
