use lpgflow_core::model::{grid_positions, rope_tables};
use lpgflow_core::numerics::{grad_check, Graph, Var};
use lpgflow_core::Result;
use proptest::prelude::*;

const STEP: f64 = 1e-6;
const TOL: f64 = 1e-3;

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.5f64..1.5, n)
}

/// Reduces any tensor to a scalar through fixed positive weights so that
/// every output element contributes a distinct, non-cancelling gradient.
fn weighted_sum(g: &mut Graph<f64>, x: Var) -> Result<Var> {
    let n = g.value(x).len();
    let shape = g.shape(x).to_vec();
    let w = g.constant(shape, (0..n).map(|i| 0.5 + (i * 37 % 11) as f64 / 11.0).collect())?;
    let y = g.mul(x, w)?;
    g.sum(y)
}

fn check(point: &[f64], f: impl Fn(&mut Graph<f64>, Var) -> Result<Var>) -> f64 {
    grad_check(|g, x| { let y = f(g, x)?; weighted_sum(g, y) }, point, STEP).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul_all_transpose_flags(p in values(2 * 3 + 3 * 4), ta: bool, tb: bool) {
        let err = check(&p, |g, x| {
            let a_shape = if ta { [3, 2] } else { [2, 3] };
            let b_shape = if tb { [4, 3] } else { [3, 4] };
            let a = g.flat_view(x, 0, a_shape)?;
            let b = g.flat_view(x, 6, b_shape)?;
            g.matmul_t(a, b, ta, tb)
        });
        prop_assert!(err <= TOL, "{err}");
    }

    #[test]
    fn batch_matmul(p in values(2 * 2 * 3 + 2 * 3 * 2)) {
        let err = check(&p, |g, x| {
            let a = g.flat_view(x, 0, [2, 2, 3])?;
            let b = g.flat_view(x, 12, [2, 3, 2])?;
            g.batch_matmul(a, b, false, false)
        });
        prop_assert!(err <= TOL, "{err}");
    }

    #[test]
    fn elementwise_binary(p in values(12)) {
        let err = check(&p, |g, x| {
            let a = g.flat_view(x, 0, [6])?;
            let b = g.flat_view(x, 6, [6])?;
            let s = g.add(a, b)?;
            let d = g.sub(a, b)?;
            let m = g.mul(s, d)?;
            let m = g.scale(m, 0.7)?;
            g.add_scalar(m, 0.3)
        });
        prop_assert!(err <= TOL, "{err}");
    }

    #[test]
    fn bias_and_expand(p in values(2 * 3 + 3)) {
        let err = check(&p, |g, x| {
            let a = g.flat_view(x, 0, [2, 3])?;
            let b = g.flat_view(x, 6, [3])?;
            let y = g.add_bias(a, b)?;
            let row = g.reshape(b, [1, 3])?;
            let e = g.expand(row, 2)?;
            let e = g.reshape(e, [2, 3])?;
            g.mul(y, e)
        });
        prop_assert!(err <= TOL, "{err}");
    }

    #[test]
    fn activations(p in values(8)) {
        let err = check(&p, |g, x| {
            let a = g.gelu(x)?;
            let b = g.silu(x)?;
            g.add(a, b)
        });
        prop_assert!(err <= TOL, "{err}");
    }

    #[test]
    fn softmax_rows(p in values(3 * 5)) {
        let err = check(&p, |g, x| {
            let x = g.reshape(x, [3, 5])?;
            g.softmax(x)
        });
        prop_assert!(err <= TOL, "{err}");
    }

    #[test]
    fn layer_norm_rows(p in values(2 * 6)) {
        let err = check(&p, |g, x| {
            let x = g.reshape(x, [2, 6])?;
            g.layer_norm(x, 1e-6)
        });
        prop_assert!(err <= TOL, "{err}");
    }

    #[test]
    fn slicing_and_concatenation(p in values(2 * 3 * 4)) {
        let err = check(&p, |g, x| {
            let x3 = g.reshape(x, [2, 3, 4])?;
            let a = g.narrow_axis1(x3, 1, 2)?;
            let a = g.slice_last(a, 0, 2)?;
            let x4 = g.reshape(x, [2, 3, 2, 2])?;
            let s = g.swap_axes12(x4)?;
            let s = g.reshape(s, [2, 6, 2])?;
            g.concat_axis1(&[a, s])
        });
        prop_assert!(err <= TOL, "{err}");
    }

    #[test]
    fn rotary_embedding(p in values(2 * 3 * 4)) {
        let tables = rope_tables::<f64>(&grid_positions(1, 3), 4, 10_000.0);
        let err = check(&p, |g, x| {
            let x = g.reshape(x, [1, 2, 3, 4])?;
            g.rope(x, &tables)
        });
        prop_assert!(err <= TOL, "{err}");
    }

    #[test]
    fn embedding_lookup_with_repeats(p in values(4 * 3)) {
        let err = check(&p, |g, x| {
            let table = g.reshape(x, [4, 3])?;
            g.embedding(table, &[2, 0, 2, 3])
        });
        prop_assert!(err <= TOL, "{err}");
    }

    #[test]
    fn reductions_and_mse(p in values(10)) {
        let err = grad_check(
            |g, x| {
                let a = g.flat_view(x, 0, [5])?;
                let b = g.flat_view(x, 5, [5])?;
                let m = g.mse(a, b)?;
                let s = g.mean(a)?;
                g.add(m, s)
            },
            &p,
            STEP,
        )
        .unwrap();
        prop_assert!(err <= TOL, "{err}");
    }

    #[test]
    fn backward_is_linear_in_the_loss(p in values(6)) {
        let grad_of = |which: u8| {
            let mut g = Graph::<f64>::new();
            let x = g.leaf([6], p.clone(), true).unwrap();
            let a = g.silu(x).unwrap();
            let la = g.sum(a).unwrap();
            let b = g.mul(x, x).unwrap();
            let lb = g.mean(b).unwrap();
            let loss = match which {
                0 => la,
                1 => lb,
                _ => g.add(la, lb).unwrap(),
            };
            g.backward(loss).unwrap();
            g.grad(x).unwrap().to_vec()
        };
        let (ga, gb, gs) = (grad_of(0), grad_of(1), grad_of(2));
        for i in 0..6 {
            prop_assert!((ga[i] + gb[i] - gs[i]).abs() <= 1e-12);
        }
    }
}
