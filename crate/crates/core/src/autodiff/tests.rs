use proptest::prelude::*;

use super::*;
use crate::gradcheck::{central_difference, FD_STEP};

fn scalar_fn_grad(build: impl Fn(&mut Graph, NodeId) -> NodeId, x: f64) -> (f64, f64) {
    let mut g = Graph::new();
    let xl = g.scalar(x);
    let y = build(&mut g, xl);
    let d = g.reverse_grad(y, &[xl]).unwrap();
    (g.value(y).item(), d[0].item())
}

#[test]
fn forward_examples() {
    let mut g = Graph::new();
    let a = g.scalar(3.0);
    let sq = g.square(a);
    assert_eq!(g.value(sq).item(), 9.0);
    let b = g.scalar(2.0);
    let c = g.scalar(5.0);
    let s = g.add(b, c).unwrap();
    assert_eq!(g.value(s).item(), 7.0);
    let v = g.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let t = g.sum(v);
    assert_eq!(g.forward_eval(t).unwrap().item(), 6.0);
}

#[test]
fn forward_eval_tracks_leaf_updates() {
    let mut g = Graph::new();
    let x = g.scalar(1.0);
    let e = g.exp(x);
    let y = g.mul(e, x).unwrap();
    g.set_leaf(x, Tensor::scalar(2.0)).unwrap();
    let out = g.forward_eval(y).unwrap().item();
    assert_eq!(out, 2.0 * 2f64.exp());
    assert!(g.set_leaf(x, Tensor::vector(vec![1.0])).is_err());
}

#[test]
fn shape_errors_name_the_primitive() {
    let mut g = Graph::new();
    let a = g.leaf(Tensor::vector(vec![1.0, 2.0]));
    let b = g.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
    match g.add(a, b) {
        Err(GraphError::ShapeMismatch { op, lhs, rhs }) => {
            assert_eq!(op, "add");
            assert_eq!(lhs, vec![2]);
            assert_eq!(rhs, vec![3]);
        }
        other => panic!("unexpected {other:?}"),
    }
    let m = g.leaf(Tensor::zeros(&[2, 3]));
    assert!(matches!(
        g.matmul(m, m),
        Err(GraphError::ShapeMismatch { op: "matmul", .. })
    ));
    assert!(matches!(
        g.matmul(a, m),
        Err(GraphError::BadShape { op: "matmul", .. })
    ));
}

#[test]
fn reverse_grad_examples() {
    assert_eq!(scalar_fn_grad(|g, x| g.square(x), 3.0).1, 6.0);
    assert_eq!(scalar_fn_grad(|g, x| g.tanh(x), 0.0).1, 1.0);

    let mut g = Graph::new();
    let y = g.leaf(Tensor::vector(vec![0.0, 0.0]));
    let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
    let d = g.sub(y, x).unwrap();
    let sq = g.square(d);
    let root = g.sum(sq);
    let grads = g.reverse_grad(root, &[y]).unwrap();
    assert_eq!(grads[0].data(), &[-2.0, -4.0]);
}

#[test]
fn reverse_grad_rejects_non_scalar_root_and_zeroes_unconnected() {
    let mut g = Graph::new();
    let v = g.leaf(Tensor::vector(vec![1.0, 2.0]));
    let w = g.leaf(Tensor::vector(vec![5.0, 5.0]));
    let sq = g.square(v);
    assert!(matches!(
        g.reverse_grad(sq, &[v]),
        Err(GraphError::NonScalarRoot(_))
    ));
    let root = g.sum(sq);
    let grads = g.reverse_grad(root, &[v, w]).unwrap();
    assert_eq!(grads[1].data(), &[0.0, 0.0]);
}

#[test]
fn grad_as_graph_examples() {
    // x^2: 2x, then 2.
    let mut g = Graph::new();
    let x = g.scalar(3.0);
    let y = g.square(x);
    let d = g.grad_as_graph(y, x).unwrap();
    assert_eq!(g.value(d).item(), 6.0);
    assert_eq!(g.reverse_grad(d, &[x]).unwrap()[0].item(), 2.0);

    // x^3 at 2: 12, then 12.
    let mut g = Graph::new();
    let x = g.scalar(2.0);
    let y = g.powi(x, 3);
    let d = g.grad_as_graph(y, x).unwrap();
    assert_eq!(g.value(d).item(), 12.0);
    assert_eq!(g.reverse_grad(d, &[x]).unwrap()[0].item(), 12.0);

    // softplus'(0) = 0.5
    let mut g = Graph::new();
    let x = g.scalar(0.0);
    let y = g.softplus(x);
    let d = g.grad_as_graph(y, x).unwrap();
    assert_eq!(g.value(d).item(), 0.5);
}

#[test]
fn max_reduce_routes_to_first_maximum() {
    let mut g = Graph::new();
    let v = g.leaf(Tensor::vector(vec![0.2, 0.9, 0.9, 0.5]));
    let m = g.max(v).unwrap();
    assert_eq!(g.value(m).item(), 0.9);
    let d = g.reverse_grad(m, &[v]).unwrap();
    assert_eq!(d[0].data(), &[0.0, 1.0, 0.0, 0.0]);
}

/// A small expression language for random graphs over a 3-vector leaf.
#[derive(Debug, Clone)]
enum Expr {
    Leaf,
    Unary(u8, Box<Expr>),
    Binary(u8, Box<Expr>, Box<Expr>),
}

fn expr_strategy() -> impl Strategy<Value = Expr> {
    let leaf = Just(Expr::Leaf);
    leaf.prop_recursive(6, 48, 2, |inner| {
        prop_oneof![
            (0u8..9, inner.clone()).prop_map(|(k, e)| Expr::Unary(k, Box::new(e))),
            (0u8..4, inner.clone(), inner).prop_map(|(k, a, b)| Expr::Binary(
                k,
                Box::new(a),
                Box::new(b)
            )),
        ]
    })
}

fn build_expr(g: &mut Graph, e: &Expr, x: NodeId, w: NodeId) -> NodeId {
    match e {
        Expr::Leaf => x,
        Expr::Unary(k, a) => {
            let a = build_expr(g, a, x, w);
            match k {
                0 => g.tanh(a),
                1 => g.sigmoid(a),
                2 => g.softplus(a),
                3 => {
                    let t = g.tanh(a);
                    g.square(t)
                }
                4 => {
                    let t = g.tanh(a);
                    g.exp(t)
                }
                5 => g.affine(a, -0.7, 0.3),
                6 => {
                    // log(1 + a^2)
                    let s = g.square(a);
                    let s = g.add_const(s, 1.0);
                    g.log(s)
                }
                7 => {
                    let m = g.leaf(Tensor::from_rows(&[
                        vec![0.5, -0.2, 0.1],
                        vec![0.3, 0.8, -0.4],
                        vec![-0.6, 0.2, 0.7],
                    ]));
                    let col = g.reshape(a, &[1, 3]).unwrap();
                    let p = g.matmul_t(col, m, false, true).unwrap();
                    g.reshape(p, &[3]).unwrap()
                }
                _ => {
                    let t = g.layer_norm(a).unwrap();
                    g.affine(t, 0.5, 0.0)
                }
            }
        }
        Expr::Binary(k, a, b) => {
            let a = build_expr(g, a, x, w);
            let b = build_expr(g, b, x, w);
            match k {
                0 => g.add(a, b).unwrap(),
                1 => g.mul(a, b).unwrap(),
                2 => {
                    let m = g.mul(a, w).unwrap();
                    g.sub(m, b).unwrap()
                }
                _ => {
                    let s = g.square(b);
                    let d = g.add_const(s, 1.0);
                    g.div(a, d).unwrap()
                }
            }
        }
    }
}

fn eval_expr(e: &Expr, p: &[f64]) -> f64 {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::vector(p.to_vec()));
    let w = g.leaf(Tensor::vector(vec![0.9, -1.1, 0.4]));
    let out = build_expr(&mut g, e, x, w);
    let s = g.sum(out);
    let lin = g.sum(x);
    let r = g.add(s, lin).unwrap();
    g.value(r).item()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn random_graphs_match_finite_differences(
        e in expr_strategy(),
        p in prop::collection::vec(-1.0f64..1.0, 3),
    ) {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(p.clone()));
        let w = g.leaf(Tensor::vector(vec![0.9, -1.1, 0.4]));
        let out = build_expr(&mut g, &e, x, w);
        let s = g.sum(out);
        let lin = g.sum(x);
        let root = g.add(s, lin).unwrap();
        let analytic = g.reverse_grad(root, &[x]).unwrap().remove(0);
        let numeric = central_difference(|q| eval_expr(&e, q), &p, FD_STEP).unwrap();
        for (a, n) in analytic.data().iter().zip(&numeric) {
            // Central differences carry an absolute error of order h²·f''' that
            // does not shrink with the gradient, hence the 1e-8 floor.
            prop_assert!(
                (a - n).abs() <= 1e-6 * a.abs().max(n.abs()) + 1e-8,
                "analytic {a} numeric {n}"
            );
        }
        let gg = g.grad_as_graph(root, x).unwrap();
        for (a, b) in g.value(gg).data().iter().zip(analytic.data()) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn second_order_matches_hessian_vector_oracle(
        e in expr_strategy(),
        p in prop::collection::vec(-1.0f64..1.0, 3),
        v in prop::collection::vec(-1.0f64..1.0, 3),
    ) {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(p.clone()));
        let w = g.leaf(Tensor::vector(vec![0.9, -1.1, 0.4]));
        let out = build_expr(&mut g, &e, x, w);
        let root = g.sum(out);
        let gg = g.grad_as_graph(root, x).unwrap();
        let vl = g.leaf(Tensor::vector(v.clone()));
        let dot = g.mul(gg, vl).unwrap();
        let h = g.sum(dot);
        let hv = g.reverse_grad(h, &[x]).unwrap().remove(0);

        let grad_at = |q: &[f64]| {
            let mut g = Graph::new();
            let x = g.leaf(Tensor::vector(q.to_vec()));
            let w = g.leaf(Tensor::vector(vec![0.9, -1.1, 0.4]));
            let out = build_expr(&mut g, &e, x, w);
            let root = g.sum(out);
            g.reverse_grad(root, &[x]).unwrap().remove(0)
        };
        let eps = FD_STEP;
        let plus: Vec<f64> = p.iter().zip(&v).map(|(a, b)| a + eps * b).collect();
        let minus: Vec<f64> = p.iter().zip(&v).map(|(a, b)| a - eps * b).collect();
        let (gp, gm) = (grad_at(&plus), grad_at(&minus));
        for i in 0..3 {
            let numeric = (gp.data()[i] - gm.data()[i]) / (2.0 * eps);
            let a = hv.data()[i];
            prop_assert!(
                (a - numeric).abs() <= 1e-4 * a.abs().max(numeric.abs()) + 1e-7,
                "analytic {a} numeric {numeric}"
            );
        }
    }

    #[test]
    fn forward_is_bit_deterministic(e in expr_strategy(), p in prop::collection::vec(-1.0f64..1.0, 3)) {
        let a = eval_expr(&e, &p);
        let b = eval_expr(&e, &p);
        prop_assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn adjoints_are_linear(
        e1 in expr_strategy(),
        e2 in expr_strategy(),
        p in prop::collection::vec(-1.0f64..1.0, 3),
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
    ) {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(p));
        let w = g.leaf(Tensor::vector(vec![0.9, -1.1, 0.4]));
        let f1 = build_expr(&mut g, &e1, x, w);
        let f1 = g.sum(f1);
        let f2 = build_expr(&mut g, &e2, x, w);
        let f2 = g.sum(f2);
        let af = g.scale(f1, a);
        let bg = g.scale(f2, b);
        let comb = g.add(af, bg).unwrap();
        let gc = g.reverse_grad(comb, &[x]).unwrap().remove(0);
        let g1 = g.reverse_grad(f1, &[x]).unwrap().remove(0);
        let g2 = g.reverse_grad(f2, &[x]).unwrap().remove(0);
        for i in 0..3 {
            let lin = a * g1.data()[i] + b * g2.data()[i];
            prop_assert!((gc.data()[i] - lin).abs() < 1e-12 * (1.0 + lin.abs()));
        }
    }
}

/// Every primitive's numeric adjoint against central differences.
#[test]
fn every_primitive_matches_finite_differences() {
    type Build = fn(&mut Graph, NodeId) -> NodeId;
    let cases: Vec<(&str, Build)> = vec![
        ("add", |g, x| g.add(x, x).unwrap()),
        ("sub", |g, x| {
            let t = g.tanh(x);
            g.sub(x, t).unwrap()
        }),
        ("mul", |g, x| {
            let t = g.sigmoid(x);
            g.mul(x, t).unwrap()
        }),
        ("div", |g, x| {
            let d = g.add_const(x, 3.0);
            g.div(x, d).unwrap()
        }),
        ("neg", |g, x| g.neg(x)),
        ("powi", |g, x| g.powi(x, 3)),
        ("powf", |g, x| {
            let s = g.add_const(x, 2.0);
            g.powf(s, 1.7)
        }),
        ("exp", |g, x| g.exp(x)),
        ("log", |g, x| {
            let s = g.add_const(x, 2.0);
            g.log(s)
        }),
        ("tanh", |g, x| g.tanh(x)),
        ("softplus", |g, x| g.softplus(x)),
        ("sigmoid", |g, x| g.sigmoid(x)),
        ("square", |g, x| g.square(x)),
        ("abs", |g, x| g.abs(x)),
        ("max_const", |g, x| g.max_const(x, 0.05)),
        ("affine", |g, x| g.affine(x, 2.5, -1.0)),
        ("matvec", |g, x| {
            let m = g.leaf(Tensor::from_rows(&[
                vec![1.0, 2.0, -1.0, 0.5],
                vec![0.3, -0.7, 0.2, 1.1],
            ]));
            let mv = g.matvec(m, x).unwrap();
            g.square(mv)
        }),
        ("mean", |g, x| {
            let m = g.mean(x).unwrap();
            let b = g.broadcast_scalar(m, &[4]).unwrap();
            g.mul(b, x).unwrap()
        }),
        ("max", |g, x| {
            let m = g.max(x).unwrap();
            g.square(m)
        }),
        ("layer_norm", |g, x| {
            let n = g.layer_norm(x).unwrap();
            let w = g.leaf(Tensor::vector(vec![1.0, -2.0, 0.5, 3.0]));
            g.mul(n, w).unwrap()
        }),
        ("concat_slice", |g, x| {
            let c = g.concat(&[x, x], 0).unwrap();
            let s = g.slice(c, 0, 2, 5).unwrap();
            g.square(s)
        }),
        ("matrix_ops", |g, x| {
            let m = g.reshape(x, &[2, 2]).unwrap();
            let p = g.matmul_t(m, m, true, false).unwrap();
            let r = g.sum_axis(p, Reduce::Axis0).unwrap();
            let c = g.mean_axis(p, Reduce::Axis1).unwrap();
            let mx = g.max_axis(p, Reduce::Axis1).unwrap();
            let rb = g.broadcast_rows(r, 2).unwrap();
            let cb = g.broadcast_cols(c, 2).unwrap();
            let t = g.mul(rb, cb).unwrap();
            let ln = g.layer_norm(t).unwrap();
            let ct = g.concat(&[ln, p], 1).unwrap();
            let sl = g.slice(ct, 1, 1, 2).unwrap();
            let f = g.reshape(sl, &[4]).unwrap();
            let mxs = g.sum(mx);
            let mb = g.broadcast_scalar(mxs, &[4]).unwrap();
            g.add(f, mb).unwrap()
        }),
    ];
    let p = vec![0.3, -0.45, 0.8, -0.15];
    for (name, build) in cases {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(p.clone()));
        let out = build(&mut g, x);
        let root = g.sum(out);
        let analytic = g.reverse_grad(root, &[x]).unwrap().remove(0);
        let f = |q: &[f64]| {
            let mut g = Graph::new();
            let x = g.leaf(Tensor::vector(q.to_vec()));
            let out = build(&mut g, x);
            let root = g.sum(out);
            g.value(root).item()
        };
        let numeric = central_difference(f, &p, FD_STEP).unwrap();
        for (a, n) in analytic.data().iter().zip(&numeric) {
            assert!(
                (a - n).abs() <= 1e-6 * a.abs().max(n.abs()) + 1e-8,
                "{name}: analytic {a} numeric {n}"
            );
        }
        // Graph-valued gradient agrees with the numeric pass.
        let gg = g.grad_as_graph(root, x).unwrap();
        for (a, b) in g.value(gg).data().iter().zip(analytic.data()) {
            assert!(
                (a - b).abs() <= 1e-12 * (1.0 + b.abs()),
                "{name}: {a} vs {b}"
            );
        }
    }
}

#[test]
fn tanh_sum_gradient_check() {
    let p = [0.37, -0.81, 0.12];
    let mut g = Graph::new();
    let x = g.leaf(Tensor::vector(p.to_vec()));
    let t = g.tanh(x);
    let root = g.sum(t);
    let analytic = g.reverse_grad(root, &[x]).unwrap().remove(0);
    let err = crate::gradcheck::finite_diff_check(
        |q| q.iter().map(|v| v.tanh()).sum(),
        analytic.data(),
        &p,
        FD_STEP,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn grad_through_non_leaf_target() {
    // d/dz of (z^2) where z = 3x, evaluated as a graph node, and the second
    // derivative with respect to the leaf x through it.
    let mut g = Graph::new();
    let x = g.scalar(1.5);
    let z = g.scale(x, 3.0);
    let y = g.powi(z, 3);
    let dz = g.grad_as_graph(y, z).unwrap();
    assert!((g.value(dz).item() - 3.0 * 4.5f64.powi(2)).abs() < 1e-12);
    // d/dx (3 z^2) = 6 z * 3 = 18 z
    let d = g.reverse_grad(dz, &[x]).unwrap();
    assert!((d[0].item() - 18.0 * 4.5).abs() < 1e-9);
}
