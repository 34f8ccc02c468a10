use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{check_inputs, check_params};
use super::*;
use crate::error::Error;

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::new(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect(),
    )
}

/// Weighted sum so every output element contributes a distinct gradient.
fn weighted_sum(g: &mut Graph, x: NodeId) -> Result<NodeId, Error> {
    let s = g.shape(x);
    let w = g.constant(Tensor::from_fn(s.rows, s.cols, |r, c| {
        0.3 + ((r * 31 + c * 17) % 13) as f64 * 0.1
    }));
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

fn assert_grad_ok<F>(inputs: &[Tensor], build: F)
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId, Error>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let r = check_inputs(inputs, 100, &mut rng, build).unwrap();
    assert_eq!(r.probes, 100);
    assert!(
        r.max_rel_error < 1e-4,
        "max rel error {} at {:?}",
        r.max_rel_error,
        r.worst
    );
}

#[test]
fn sigmoid_of_zero_is_half() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::scalar(0.0));
    let y = g.sigmoid(x);
    assert_eq!(g.value(y).item(), 0.5);
}

#[test]
fn identity_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, 3, 3, -2.0, 2.0);
    let mut g = Graph::new();
    let i = g.constant(Tensor::identity(3));
    let an = g.constant(a.clone());
    let y = g.matmul(i, an).unwrap();
    assert_eq!(g.value(y), &a);
}

#[test]
fn softmax_of_equal_logits() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::row(&[1.0, 1.0, 1.0]));
    let y = g.softmax(x);
    for v in g.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn square_gradient() {
    let mut g = Graph::new();
    let x = g.input(Tensor::scalar(3.0));
    let y = g.mul(x, x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).item(), 6.0);
}

#[test]
fn sigmoid_gradient_at_zero() {
    let mut g = Graph::new();
    let x = g.input(Tensor::scalar(0.0));
    let y = g.sigmoid(x);
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).item(), 0.25);
}

#[test]
fn non_scalar_loss_rejected() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(2, 2));
    assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
}

#[test]
fn shape_mismatch_names_op_and_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(2, 3));
    let b = g.constant(Tensor::zeros(4, 5));
    let msg = g.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("matmul") && msg.contains("[2x3]") && msg.contains("[4x5]"), "{msg}");
    let msg = g.add(a, b).unwrap_err().to_string();
    assert!(msg.contains("add"), "{msg}");
}

#[test]
fn non_ancestors_have_zero_grad() {
    let mut g = Graph::new();
    let x = g.input(Tensor::scalar(2.0));
    let unrelated = g.input(Tensor::row(&[1.0, 2.0]));
    let _u2 = g.exp(unrelated);
    let y = g.square(x);
    g.backward(y).unwrap();
    assert_eq!(g.grad(unrelated).data(), &[0.0, 0.0]);
    assert_eq!(g.grad(x).item(), 4.0);
}

#[test]
fn parents_precede_children() {
    let mut g = Graph::new();
    let a = g.input(Tensor::row(&[1.0, 2.0]));
    let b = g.exp(a);
    let c = g.mul(a, b).unwrap();
    let d = g.sum(c);
    for id in [b, c, d] {
        assert!(g.parents(id).iter().all(|p| p.index() < id.index()));
    }
}

#[test]
fn backward_is_linear_in_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x0 = rand_tensor(&mut rng, 4, 3, -1.0, 1.0);
    let grad_for = |scale: f64| {
        let mut g = Graph::new();
        let x = g.input(x0.clone());
        let s = g.sin(x);
        let p = g.mul(s, x).unwrap();
        let l = g.sum(p);
        let l = g.scale(l, scale);
        g.backward(l).unwrap();
        g.grad(x)
    };
    let base = grad_for(1.0);
    let scaled = grad_for(-2.5);
    for (a, b) in base.data().iter().zip(scaled.data()) {
        assert!((b - (-2.5) * a).abs() <= 1e-14 * a.abs().max(1.0));
    }
}

#[test]
fn binary_ops_gradients_with_broadcast() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = rand_tensor(&mut rng, 5, 4, 0.5, 2.0);
    let row = rand_tensor(&mut rng, 1, 4, 0.5, 2.0);
    let col = rand_tensor(&mut rng, 5, 1, 0.5, 2.0);
    let sc = rand_tensor(&mut rng, 1, 1, 0.5, 2.0);
    assert_grad_ok(&[a.clone(), row.clone()], |g, x| {
        let y = g.add(x[0], x[1])?;
        weighted_sum(g, y)
    });
    assert_grad_ok(&[a.clone(), col.clone()], |g, x| {
        let y = g.sub(x[1], x[0])?;
        weighted_sum(g, y)
    });
    assert_grad_ok(&[a.clone(), row.clone()], |g, x| {
        let y = g.mul(x[0], x[1])?;
        weighted_sum(g, y)
    });
    assert_grad_ok(&[a.clone(), sc], |g, x| {
        let y = g.div(x[0], x[1])?;
        weighted_sum(g, y)
    });
    assert_grad_ok(&[col, a], |g, x| {
        let y = g.div(x[0], x[1])?;
        weighted_sum(g, y)
    });
}

#[test]
fn matmul_and_shape_op_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let a = rand_tensor(&mut rng, 6, 4, -1.0, 1.0);
    let b = rand_tensor(&mut rng, 4, 3, -1.0, 1.0);
    assert_grad_ok(&[a.clone(), b.clone()], |g, x| {
        let y = g.matmul(x[0], x[1])?;
        weighted_sum(g, y)
    });
    assert_grad_ok(&[a.clone()], |g, x| {
        let t = g.transpose(x[0]);
        let r = g.reshape(t, 2, 12)?;
        weighted_sum(g, r)
    });
    let row = rand_tensor(&mut rng, 1, 4, -1.0, 1.0);
    assert_grad_ok(&[row], |g, x| {
        let y = g.broadcast(x[0], 5, 4)?;
        weighted_sum(g, y)
    });
    assert_grad_ok(&[a.clone(), b.clone()], |g, x| {
        let bt = g.transpose(x[1]);
        let c = g.concat_rows(&[x[0], bt])?;
        let d = g.concat_cols(&[c, c])?;
        weighted_sum(g, d)
    });
    assert_grad_ok(&[a.clone()], |g, x| {
        let s = g.slice_cols(x[0], 1, 2)?;
        let r = g.slice_rows(s, 2, 3)?;
        weighted_sum(g, r)
    });
    let index: Arc<[Option<u32>]> = vec![Some(2), None, Some(0), Some(2), Some(5), None].into();
    assert_grad_ok(&[a.clone()], move |g, x| {
        let y = g.gather_rows(x[0], index.clone())?;
        weighted_sum(g, y)
    });
    assert_grad_ok(&[a], |g, x| {
        let y = g.row_group_sum(x[0], 3)?;
        weighted_sum(g, y)
    });
}

#[test]
fn dense_gradients_match_unfused() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = rand_tensor(&mut rng, 7, 5, -1.0, 1.0);
    let w = rand_tensor(&mut rng, 5, 4, -1.0, 1.0);
    let b = rand_tensor(&mut rng, 1, 4, -0.5, 0.5);
    for act in [None, Some(Unary::Relu), Some(Unary::Softplus(10.0))] {
        assert_grad_ok(&[x.clone(), w.clone(), b.clone()], |g, n| {
            let y = g.dense(n[0], n[1], n[2], act)?;
            weighted_sum(g, y)
        });
        let mut g = Graph::new();
        let (xn, wn, bn) = (g.input(x.clone()), g.input(w.clone()), g.input(b.clone()));
        let fused = g.dense(xn, wn, bn, act).unwrap();
        let m = g.matmul(xn, wn).unwrap();
        let bb = g.broadcast(bn, 7, 4).unwrap();
        let mut plain = g.add(m, bb).unwrap();
        if let Some(a) = act {
            plain = g.unary(a, plain);
        }
        for (p, q) in g.value(fused).data().iter().zip(g.value(plain).data()) {
            assert!((p - q).abs() < 1e-14);
        }
    }
    let mut g = Graph::new();
    let (xn, wn, bn) = (g.input(x), g.input(w), g.input(b));
    assert!(g.dense(xn, wn, bn, Some(Unary::Sigmoid)).is_err());
}

#[test]
fn unary_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = rand_tensor(&mut rng, 6, 5, -2.0, 2.0);
    let pos = rand_tensor(&mut rng, 6, 5, 0.2, 3.0);
    let small = rand_tensor(&mut rng, 6, 5, -0.05, 0.05);
    let ops = [
        Unary::Scale(-1.7),
        Unary::AddScalar(0.3),
        Unary::Relu,
        Unary::Softplus(1.0),
        Unary::Softplus(100.0),
        Unary::Sigmoid,
        Unary::Exp,
        Unary::Sin,
        Unary::Cos,
        Unary::Abs,
        Unary::Square,
        Unary::SmoothL1(1.0),
        Unary::SmoothL1(0.5),
        Unary::ClampMin(0.1),
    ];
    for op in ops {
        assert_grad_ok(&[x.clone()], move |g, i| {
            let y = g.unary(op, i[0]);
            weighted_sum(g, y)
        });
    }
    // softplus(100x) is curved only near zero
    assert_grad_ok(&[small], |g, i| {
        let y = g.softplus(i[0], 100.0);
        weighted_sum(g, y)
    });
    for op in [Unary::Log, Unary::Sqrt] {
        assert_grad_ok(&[pos.clone()], move |g, i| {
            let y = g.unary(op, i[0]);
            weighted_sum(g, y)
        });
    }
}

#[test]
fn reduction_and_composite_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = rand_tensor(&mut rng, 7, 5, -2.0, 2.0);
    assert_grad_ok(&[x.clone()], |g, i| {
        let y = g.sum_axis(i[0], Axis::Rows);
        weighted_sum(g, y)
    });
    assert_grad_ok(&[x.clone()], |g, i| {
        let y = g.mean_axis(i[0], Axis::Cols);
        weighted_sum(g, y)
    });
    assert_grad_ok(&[x.clone()], |g, i| {
        let y = g.mean(i[0]);
        let z = g.square(y);
        Ok(g.sum(z))
    });
    assert_grad_ok(&[x.clone()], |g, i| {
        let y = g.max_axis(i[0], Axis::Cols);
        weighted_sum(g, y)
    });
    assert_grad_ok(&[x.clone()], |g, i| {
        let y = g.max_axis(i[0], Axis::Rows);
        weighted_sum(g, y)
    });
    assert_grad_ok(&[x.clone()], |g, i| {
        let y = g.softmax(i[0]);
        weighted_sum(g, y)
    });
    assert_grad_ok(&[x.clone()], |g, i| {
        let y = g.layer_norm(i[0], Axis::Cols, 1e-5);
        weighted_sum(g, y)
    });
    assert_grad_ok(&[x.clone()], |g, i| {
        let y = g.layer_norm(i[0], Axis::Rows, 1e-5);
        weighted_sum(g, y)
    });
    let probs = rand_tensor(&mut rng, 4, 9, 0.0, 1.0);
    assert_grad_ok(&[probs], |g, i| {
        let y = g.cumprod_exclusive(i[0]);
        weighted_sum(g, y)
    });
}

#[test]
fn cumprod_gradient_with_exact_zero() {
    let x = Tensor::row(&[0.5, 0.0, 0.7, 0.9]);
    let mut g = Graph::new();
    let xi = g.input(x);
    let y = g.cumprod_exclusive(xi);
    assert_eq!(g.value(y).data(), &[1.0, 0.5, 0.0, 0.0]);
    let l = weighted_sum(&mut g, y).unwrap();
    g.backward(l).unwrap();
    let w = |c: usize| 0.3 + ((c * 17) % 13) as f64 * 0.1;
    // d/dx1 of (w2·x0·x1 + w3·x0·x1·x2) at x1 = 0
    let expected = w(2) * 0.5 + w(3) * 0.5 * 0.7;
    assert!((g.grad(xi).data()[1] - expected).abs() < 1e-15);
}

#[test]
fn two_layer_mlp_parameter_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut store = ParamStore::new();
    let w1 = store.add("w1", rand_tensor(&mut rng, 4, 8, -0.8, 0.8));
    let b1 = store.add("b1", rand_tensor(&mut rng, 1, 8, -0.2, 0.2));
    let w2 = store.add("w2", rand_tensor(&mut rng, 8, 2, -0.8, 0.8));
    let b2 = store.add("b2", rand_tensor(&mut rng, 1, 2, -0.2, 0.2));
    let x = rand_tensor(&mut rng, 10, 4, -1.0, 1.0);
    let target = rand_tensor(&mut rng, 10, 2, -1.0, 1.0);
    let report = check_params(&store, &[w1, b1, w2, b2], 100, &mut rng, |g, s| {
        let xi = g.constant(x.clone());
        let (w1, b1, w2, b2) = (g.param(s, w1), g.param(s, b1), g.param(s, w2), g.param(s, b2));
        let h = g.matmul(xi, w1)?;
        let h = g.add(h, b1)?;
        let h = g.softplus(h, 1.0);
        let o = g.matmul(h, w2)?;
        let o = g.add(o, b2)?;
        let t = g.constant(target.clone());
        let d = g.sub(o, t)?;
        let d = g.square(d);
        Ok(g.mean(d))
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn evaluation_is_deterministic_across_thread_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = rand_tensor(&mut rng, 5000, 16, -1.0, 1.0);
    let b = rand_tensor(&mut rng, 16, 8, -1.0, 1.0);
    let run = || {
        let mut g = Graph::new();
        let ai = g.input(a.clone());
        let bi = g.input(b.clone());
        let c = g.matmul(ai, bi).unwrap();
        let c = g.softplus(c, 10.0);
        let s = g.sum_axis(c, Axis::Rows);
        let l = g.sum(s);
        g.backward(l).unwrap();
        (g.value(l).item(), g.grad(ai), g.grad(bi))
    };
    let (l1, ga1, gb1) = run();
    let (l2, ga2, gb2) = crate::parallel::run_single_threaded(run);
    assert_eq!(l1.to_bits(), l2.to_bits());
    assert!(ga1.data().iter().zip(ga2.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(gb1.data().iter().zip(gb2.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn grads_match_value_shapes() {
    let mut g = Graph::new();
    let a = g.input(Tensor::zeros(3, 2));
    let b = g.input(Tensor::zeros(1, 2));
    let c = g.add(a, b).unwrap();
    let l = g.sum(c);
    g.backward(l).unwrap();
    for id in [a, b, c, l] {
        assert_eq!(g.grad(id).shape(), g.shape(id));
    }
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(vals in proptest::collection::vec(-30.0f64..30.0, 12)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(3, 4, vals));
        let y = g.softmax(x);
        for r in 0..3 {
            let s: f64 = g.value(y).row_slice(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(g.value(y).row_slice(r).iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn broadcast_add_gradient_counts_rows(rows in 1usize..20, cols in 1usize..6) {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(rows, cols));
        let b = g.input(Tensor::zeros(1, cols));
        let c = g.add(a, b).unwrap();
        let l = g.sum(c);
        g.backward(l).unwrap();
        prop_assert!(g.grad(b).data().iter().all(|v| *v == rows as f64));
    }
}
