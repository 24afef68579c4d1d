mod common;

use mode_core::tensor::{finite_diff_grad, relative_error, softmax_row, Matrix, Tape};
use mode_core::Result;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    Matrix::random_normal(rows, cols, 1.0, &mut common::rng(seed))
}

/// loss = sum( softmax(x W1) ⊙ (x W2 + outer(u, v)) ) with a few extra ops on
/// the side, evaluated either on a tape or through plain matrix arithmetic.
fn composite(params: &[Matrix], x: &Matrix, tape: Option<&mut Tape>) -> Result<(f64, Vec<Matrix>)> {
    match tape {
        Some(t) => {
            let xv = t.constant(x.clone());
            let vars: Vec<_> = params.iter().map(|p| t.param(p.clone())).collect();
            let logits = t.matmul(xv, vars[0])?;
            let probs = t.softmax_rows(logits);
            let lin = t.matmul(xv, vars[1])?;
            let uv = t.outer(vars[2], vars[3])?;
            let mixed = t.add(lin, uv)?;
            let gated = t.hadamard(probs, mixed)?;
            let first = t.slice_cols(gated, 0, 1)?;
            let col = t.mul_column(mixed, first)?;
            let diff = t.sub(col, gated)?;
            let scaled = t.scale(diff, 0.7);
            let total = t.sum(scaled);
            t.backward(total)?;
            Ok((t.value(total).get(0, 0), vars.iter().map(|&v| t.grad(v).clone()).collect()))
        }
        None => {
            let logits = x.matmul(&params[0])?;
            let mut probs = logits.clone();
            for i in 0..logits.rows() {
                let row = softmax_row(logits.row(i));
                for (j, v) in row.into_iter().enumerate() {
                    probs.set(i, j, v);
                }
            }
            let lin = x.matmul(&params[1])?;
            let uv = mode_core::tensor::outer(&params[2].column(0), &params[3].column(0))?;
            let mixed = lin.add(&uv)?;
            let gated = probs.hadamard(&mixed)?;
            let mut col = mixed.clone();
            for i in 0..col.rows() {
                let c = gated.get(i, 0);
                for j in 0..col.cols() {
                    col.set(i, j, mixed.get(i, j) * c);
                }
            }
            Ok((col.sub(&gated)?.scale(0.7).sum(), Vec::new()))
        }
    }
}

#[test]
fn backward_matches_finite_differences_on_composite_graphs() {
    for seed in 0..25u64 {
        let n = 1 + (seed as usize % 4);
        let (p, q) = (2 + seed as usize % 3, 3);
        let x = matrix(n, p, seed);
        let params = vec![matrix(p, q, seed + 100), matrix(p, q, seed + 200), matrix(n, 1, seed + 300), matrix(q, 1, seed + 400)];

        let mut tape = Tape::new();
        let (value, grads) = composite(&params, &x, Some(&mut tape)).unwrap();
        let (plain, _) = composite(&params, &x, None).unwrap();
        assert!((value - plain).abs() < 1e-12 * (1.0 + plain.abs()));

        let numeric = finite_diff_grad(|ps| composite(ps, &x, None).map(|r| r.0), &params, 1e-5).unwrap();
        for (i, (analytic, num)) in grads.iter().zip(&numeric).enumerate() {
            let err = relative_error(analytic, num);
            assert!(err <= 1e-6, "seed {seed} param {i}: relative error {err}");
        }
    }
}

#[test]
fn non_scalar_backward_rejected() {
    let mut t = Tape::new();
    let a = t.param(Matrix::zeros(2, 2));
    assert!(t.backward(a).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_is_associative(seed in any::<u64>(), n in 1usize..7, k in 1usize..7, l in 1usize..7, m in 1usize..7) {
        let a = matrix(n, k, seed);
        let b = matrix(k, l, seed ^ 1);
        let c = matrix(l, m, seed ^ 2);
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        prop_assert!(relative_error(&left, &right) <= 1e-9);
    }

    #[test]
    fn softmax_sums_to_one_and_ignores_shifts(logits in prop::collection::vec(-30.0f64..30.0, 1..12), shift in -100.0f64..100.0) {
        let p = softmax_row(&logits);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(p.iter().all(|&v| v >= 0.0));
        let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
        let ps = softmax_row(&shifted);
        for (a, b) in p.iter().zip(&ps) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}
