use super::{Adapter, AdapterConfig, LoraAdapter, ModeAdapter, MoLoraAdapter, MoLoraSdAdapter};
use crate::error::{Error, Result};
use crate::tensor::{outer, softmax_row, Matrix, Tape, Var};

pub(super) fn check_io(x: &Matrix, w0: &Matrix, cfg: &AdapterConfig) -> Result<()> {
    if x.cols() != cfg.input_dim {
        return Err(Error::Shape {
            op: "adapter input",
            lhs: x.shape(),
            rhs: (cfg.input_dim, cfg.output_dim),
        });
    }
    if w0.shape() != (cfg.input_dim, cfg.output_dim) {
        return Err(Error::Shape {
            op: "adapter base weight",
            lhs: w0.shape(),
            rhs: (cfg.input_dim, cfg.output_dim),
        });
    }
    Ok(())
}

/// `x A Bᵀ`
fn low_rank(tape: &mut Tape, x: Var, down: Var, up: Var) -> Result<Var> {
    let h = tape.matmul(x, down)?;
    low_rank_from_hidden(tape, h, up)
}

fn low_rank_from_hidden(tape: &mut Tape, hidden: Var, up: Var) -> Result<Var> {
    let ut = tape.transpose(up);
    tape.matmul(hidden, ut)
}

/// `Σ_i R^i(x) · term_i` with `R(x) = softmax(x W_R)` per row.
fn mix(tape: &mut Tape, x: Var, router: Var, terms: &[Var]) -> Result<Var> {
    let logits = tape.matmul(x, router)?;
    let weights = tape.softmax_rows(logits);
    let mut acc: Option<Var> = None;
    for (i, &term) in terms.iter().enumerate() {
        let w = tape.slice_cols(weights, i, 1)?;
        let scaled = tape.mul_column(term, w)?;
        acc = Some(match acc {
            None => scaled,
            Some(a) => tape.add(a, scaled)?,
        });
    }
    acc.ok_or(Error::Empty("mixture"))
}

/// Adapter update `Δ(x)` given leaves in canonical parameter order.
pub(super) fn delta_graph(adapter: &Adapter, tape: &mut Tape, x: Var, leaves: &[Var]) -> Result<Var> {
    match adapter {
        Adapter::Lora(_) => low_rank(tape, x, leaves[0], leaves[1]),
        Adapter::MoLora(a) => {
            let m = a.experts.len();
            let terms = (0..m)
                .map(|i| low_rank(tape, x, leaves[2 * i], leaves[2 * i + 1]))
                .collect::<Result<Vec<_>>>()?;
            mix(tape, x, leaves[2 * m], &terms)
        }
        Adapter::MoLoraSd(a) => {
            let m = a.ups.len();
            let hidden = tape.matmul(x, leaves[0])?;
            let terms = (0..m)
                .map(|i| low_rank_from_hidden(tape, hidden, leaves[1 + i]))
                .collect::<Result<Vec<_>>>()?;
            mix(tape, x, leaves[1 + m], &terms)
        }
        Adapter::Mode(a) => {
            let m = a.groups[0].experts.len();
            let p = a.groups[0].experts[0].cols();
            let hidden = tape.matmul(x, leaves[0])?;
            let mut acc: Option<Var> = None;
            for k in 0..a.groups.len() {
                let base = 1 + k * (m + 1);
                let slice = tape.slice_cols(hidden, k * p, p)?;
                let terms = (0..m)
                    .map(|i| low_rank_from_hidden(tape, slice, leaves[base + i]))
                    .collect::<Result<Vec<_>>>()?;
                let group = mix(tape, x, leaves[base + m], &terms)?;
                acc = Some(match acc {
                    None => group,
                    Some(prev) => tape.add(prev, group)?,
                });
            }
            acc.ok_or(Error::Empty("mode groups"))
        }
    }
}

/// `y = x W0 + x A Bᵀ`
pub fn lora_forward(x: &Matrix, w0: &Matrix, adapter: &LoraAdapter) -> Result<Matrix> {
    Adapter::Lora(adapter.clone()).forward(x, w0)
}

/// `y_t = x_t W0 + Σ_i R^i(x_t) x_t A^i B^iᵀ`
pub fn molora_forward(x: &Matrix, w0: &Matrix, adapter: &MoLoraAdapter) -> Result<Matrix> {
    Adapter::MoLora(adapter.clone()).forward(x, w0)
}

/// As [`molora_forward`] with one shared down-projection.
pub fn molora_sd_forward(x: &Matrix, w0: &Matrix, adapter: &MoLoraSdAdapter) -> Result<Matrix> {
    Adapter::MoLoraSd(adapter.clone()).forward(x, w0)
}

/// `y_t = x_t W0 + Σ_k Σ_i R^i_k(x_t) x_t A_k B_{k,i}ᵀ` where `A_k` is the
/// `k`-th `p`-column slice of the shared down-projection.
pub fn mode_forward(x: &Matrix, w0: &Matrix, adapter: &ModeAdapter) -> Result<Matrix> {
    Adapter::Mode(adapter.clone()).forward(x, w0)
}

/// Routing distribution of group `group` (0-based) for one token.
pub fn route(x_token: &Matrix, adapter: &ModeAdapter, group: usize) -> Result<Vec<f64>> {
    let g = adapter.groups.get(group).ok_or(Error::Index {
        what: "routing group",
        index: group,
        len: adapter.groups.len(),
    })?;
    if x_token.rows() != 1 {
        return Err(Error::Shape {
            op: "route",
            lhs: x_token.shape(),
            rhs: (1, g.router.rows()),
        });
    }
    let logits = x_token.matmul(&g.router)?;
    Ok(softmax_row(logits.data()))
}

/// `Σ_i a_i ⊗ b_i` over the rank columns of `down (P x r)` and `up (Q x r)`.
pub fn dyadic_reconstruct(down: &Matrix, up: &Matrix) -> Result<Matrix> {
    if down.cols() != up.cols() {
        return Err(Error::Shape {
            op: "dyadic_reconstruct",
            lhs: down.shape(),
            rhs: up.shape(),
        });
    }
    let mut acc = Matrix::zeros(down.rows(), up.rows());
    for j in 0..down.cols() {
        acc.add_assign(&outer(&down.column(j), &up.column(j))?);
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::ModeGroup;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn lora_hand_example() {
        let a = LoraAdapter {
            down: m(&[&[1.0], &[0.0]]),
            up: m(&[&[2.0], &[3.0]]),
        };
        let y = lora_forward(&m(&[&[1.0, 0.0]]), &Matrix::identity(2), &a).unwrap();
        assert_eq!(y, m(&[&[3.0, 3.0]]));
    }

    #[test]
    fn mode_hand_example() {
        let a = ModeAdapter {
            down: Matrix::identity(2),
            groups: vec![
                ModeGroup {
                    experts: vec![m(&[&[1.0], &[0.0]]), m(&[&[0.0], &[1.0]])],
                    router: Matrix::zeros(2, 2),
                },
                ModeGroup {
                    experts: vec![Matrix::zeros(2, 1), Matrix::zeros(2, 1)],
                    router: Matrix::zeros(2, 2),
                },
            ],
        };
        let y = mode_forward(&m(&[&[1.0, 0.0]]), &Matrix::zeros(2, 2), &a).unwrap();
        assert_eq!(y, m(&[&[0.5, 0.5]]));
    }

    #[test]
    fn molora_uniform_router_averages() {
        let e1 = LoraAdapter {
            down: m(&[&[1.0], &[2.0]]),
            up: m(&[&[1.0], &[-1.0], &[0.5]]),
        };
        let e2 = LoraAdapter {
            down: m(&[&[0.0], &[1.0]]),
            up: m(&[&[4.0], &[2.0], &[0.0]]),
        };
        let x = m(&[&[1.0, 1.0]]);
        let w0 = Matrix::zeros(2, 3);
        let a = MoLoraAdapter {
            experts: vec![e1.clone(), e2.clone()],
            router: Matrix::zeros(2, 2),
        };
        let y = molora_forward(&x, &w0, &a).unwrap();
        // e1: x·A = 3 -> [3,-3,1.5]; e2: x·A = 1 -> [4,2,0]
        let expect = m(&[&[3.5, -0.5, 0.75]]);
        assert!(y.max_abs_diff(&expect) < 1e-15);
    }

    #[test]
    fn shape_errors() {
        let a = LoraAdapter {
            down: Matrix::zeros(3, 1),
            up: Matrix::zeros(2, 1),
        };
        assert!(matches!(
            lora_forward(&Matrix::zeros(1, 2), &Matrix::zeros(3, 2), &a),
            Err(Error::Shape { .. })
        ));
        assert!(matches!(
            lora_forward(&Matrix::zeros(1, 3), &Matrix::zeros(2, 2), &a),
            Err(Error::Shape { .. })
        ));
        assert!(dyadic_reconstruct(&Matrix::zeros(3, 2), &Matrix::zeros(2, 1)).is_err());
    }

    #[test]
    fn route_group_out_of_range() {
        let a = ModeAdapter {
            down: Matrix::zeros(2, 1),
            groups: vec![ModeGroup {
                experts: vec![Matrix::zeros(2, 1)],
                router: Matrix::zeros(2, 1),
            }],
        };
        assert!(matches!(route(&Matrix::zeros(1, 2), &a, 1), Err(Error::Index { .. })));
        assert_eq!(route(&Matrix::zeros(1, 2), &a, 0).unwrap(), vec![1.0]);
    }

    #[test]
    fn dyadic_single_term_and_zero() {
        let a = m(&[&[1.0], &[2.0]]);
        let b = m(&[&[3.0], &[4.0], &[5.0]]);
        assert_eq!(dyadic_reconstruct(&a, &b).unwrap(), outer(&[1.0, 2.0], &[3.0, 4.0, 5.0]).unwrap());
        assert_eq!(dyadic_reconstruct(&a, &Matrix::zeros(3, 1)).unwrap(), Matrix::zeros(2, 3));
    }
}
