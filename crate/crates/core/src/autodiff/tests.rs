use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    t(shape, &(0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>())
}

/// Central finite differences of `f` with respect to every entry of `params[which]`.
fn finite_diff(
    f: &dyn Fn(&[Tensor]) -> f64,
    params: &[Tensor],
    which: usize,
    h: f64,
) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..params[which].len() {
        let mut plus = params.to_vec();
        plus[which].data_mut()[i] += h;
        let mut minus = params.to_vec();
        minus[which].data_mut()[i] -= h;
        out.push((f(&plus) - f(&minus)) / (2.0 * h));
    }
    out
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

#[test]
fn relu_example() {
    let mut g = Graph::new();
    let x = g.input(Tensor::vector(vec![-1.0, 0.0, 2.0]));
    let y = g.relu(x).unwrap();
    assert_eq!(g.value(y).unwrap().data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn matmul_example() {
    let mut g = Graph::new();
    let a = g.input(t(&[1, 1], &[3.0]));
    let b = g.input(t(&[1, 1], &[4.0]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).unwrap().data(), &[12.0]);
}

#[test]
fn l2_norm_rows_example() {
    let mut g = Graph::new();
    let a = g.input(t(&[1, 2], &[3.0, 4.0]));
    let n = g.l2_norm_rows(a).unwrap();
    assert_eq!(g.value(n).unwrap().data(), &[5.0]);
}

#[test]
fn shape_mismatch_is_reported() {
    let mut g = Graph::new();
    let a = g.input(Tensor::zeros(&[2, 3]));
    let b = g.input(Tensor::zeros(&[2, 3]));
    assert!(matches!(g.matmul(a, b), Err(AutodiffError::ShapeMismatch { op: "matmul", .. })));
    let c = g.input(Tensor::zeros(&[3]));
    assert!(matches!(g.add(a, c), Err(AutodiffError::ShapeMismatch { .. })));
}

#[test]
fn non_finite_reports_node() {
    let mut g = Graph::new();
    let a = g.input(Tensor::vector(vec![1.0, -1.0]));
    let err = g.log(a).unwrap_err();
    assert_eq!(err, AutodiffError::NonFinite { node: 1, op: "log" });
}

#[test]
fn square_first_and_second_derivative() {
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(3.0));
    let y = g.square(x).unwrap();
    let dx = g.gradients(y, &[x]).unwrap()[0];
    assert_eq!(g.scalar(dx).unwrap(), 6.0);
    let ddx = g.gradients(dx, &[x]).unwrap()[0];
    assert_eq!(g.scalar(ddx).unwrap(), 2.0);
}

#[test]
fn backward_requires_scalar_root() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0]));
    let y = g.square(x).unwrap();
    assert!(matches!(g.backward(y), Err(AutodiffError::NotScalar(_))));
}

#[test]
fn backward_requires_evaluation() {
    let mut g = Graph::new();
    let x = g.placeholder(&[2], true);
    let y = g.square(x).unwrap();
    let s = g.sum(y).unwrap();
    assert!(matches!(g.backward(s), Err(AutodiffError::NotEvaluated(_))));
    let mut b = HashMap::new();
    b.insert(x, Tensor::vector(vec![1.0, 2.0]));
    g.forward(&b).unwrap();
    assert_eq!(g.scalar(s).unwrap(), 5.0);
    let grads = g.backward(s).unwrap();
    assert_eq!(g.value(grads.get(x).unwrap()).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn forward_requires_all_leaves_bound() {
    let mut g = Graph::new();
    let x = g.placeholder(&[2], false);
    let _ = g.exp(x).unwrap();
    assert_eq!(g.forward(&HashMap::new()), Err(AutodiffError::Unbound(0)));
}

#[test]
fn forward_is_deterministic_and_rebinds() {
    let mut g = Graph::new();
    let x = g.placeholder(&[2, 2], false);
    let w = g.param(t(&[2, 2], &[0.5, -1.0, 2.0, 0.25]));
    let h = g.matmul(x, w).unwrap();
    let h = g.tanh(h).unwrap();
    let s = g.sum(h).unwrap();
    let mut b = HashMap::new();
    b.insert(x, t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    g.forward(&b).unwrap();
    let first = g.scalar(s).unwrap();
    g.forward(&b).unwrap();
    assert_eq!(first.to_bits(), g.scalar(s).unwrap().to_bits());
    b.insert(x, t(&[2, 2], &[0.0; 4]));
    g.forward(&b).unwrap();
    assert_eq!(g.scalar(s).unwrap(), 0.0);
}

#[test]
fn grad_norm_of_linear_is_weight_norm() {
    let mut g = Graph::new();
    let w = g.input(t(&[2, 1], &[1.0, 0.0]));
    for x in [[0.3, -2.0], [5.0, 1.0]] {
        let xi = g.param(t(&[1, 2], &x));
        let d = g.matmul(xi, w).unwrap();
        let d = g.sum(d).unwrap();
        let n = g.grad_norm(d, xi).unwrap();
        assert!((g.scalar(n).unwrap() - 1.0).abs() < 1e-15);
    }
}

#[test]
fn grad_norm_of_scaled_scalar() {
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(-0.7));
    let d = g.scale(x, 2.0).unwrap();
    let n = g.grad_norm(d, x).unwrap();
    assert_eq!(g.scalar(n).unwrap(), 2.0);
}

#[test]
fn grad_norm_rejects_non_ancestor() {
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(1.0));
    let y = g.param(Tensor::scalar(2.0));
    let d = g.square(x).unwrap();
    assert!(matches!(g.grad_norm(d, y), Err(AutodiffError::NotAncestor { .. })));
}

fn sum_of_squares_norm(x: &[f64]) -> f64 {
    let mut g = Graph::new();
    let xi = g.param(t(&[2], x));
    let sq = g.square(xi).unwrap();
    let d = g.sum(sq).unwrap();
    let n = g.grad_norm(d, xi).unwrap();
    g.scalar(n).unwrap()
}

#[test]
fn grad_norm_second_order_against_finite_differences() {
    let mut g = Graph::new();
    let xi = g.param(t(&[2], &[1.0, 1.0]));
    let sq = g.square(xi).unwrap();
    let d = g.sum(sq).unwrap();
    let n = g.grad_norm(d, xi).unwrap();
    assert!((g.scalar(n).unwrap() - 8f64.sqrt()).abs() < 1e-14);
    let dn = g.gradients(n, &[xi]).unwrap()[0];
    let analytic = g.value(dn).unwrap().data()[0];

    let h = 1e-5;
    let fd = (sum_of_squares_norm(&[1.0 + h, 1.0]) - sum_of_squares_norm(&[1.0 - h, 1.0])) / (2.0 * h);
    assert!((analytic - fd).abs() / fd.abs() < 1e-6, "{analytic} vs {fd}");
}

#[derive(Clone, Copy)]
enum Act {
    Relu,
    Sigmoid,
    Tanh,
}

/// Scalar loss of a 2-layer dense net; `params = [w1, b1, w2, b2]`.
fn two_layer(g: &mut Graph, x: NodeId, p: &[NodeId], act: Act) -> NodeId {
    let h = g.matmul(x, p[0]).unwrap();
    let h = g.add_bias(h, p[1]).unwrap();
    let h = match act {
        Act::Relu => g.relu(h).unwrap(),
        Act::Sigmoid => g.sigmoid(h).unwrap(),
        Act::Tanh => g.tanh(h).unwrap(),
    };
    let o = g.matmul(h, p[2]).unwrap();
    g.add_bias(o, p[3]).unwrap()
}

#[test]
fn dense_net_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&[5, 4], &mut rng);
    let labels = [0usize, 2, 1, 1, 0];
    for act in [Act::Relu, Act::Sigmoid, Act::Tanh] {
        let params = vec![
            random(&[4, 6], &mut rng),
            random(&[6], &mut rng),
            random(&[6, 3], &mut rng),
            random(&[3], &mut rng),
        ];
        // cross-entropy plus a squared-output term exercises both loss kinds
        let loss = |ps: &[Tensor]| -> (Graph, NodeId, Vec<NodeId>) {
            let mut g = Graph::new();
            let xi = g.input(x.clone());
            let ids: Vec<NodeId> = ps.iter().map(|p| g.param(p.clone())).collect();
            let o = two_layer(&mut g, xi, &ids, act);
            let ce = g.softmax_cross_entropy(o, &labels).unwrap();
            let sq = g.square(o).unwrap();
            let m = g.mean(sq).unwrap();
            let l = g.add(ce, m).unwrap();
            (g, l, ids)
        };
        let f = |ps: &[Tensor]| {
            let (g, l, _) = loss(ps);
            g.scalar(l).unwrap()
        };
        let (mut g, l, ids) = loss(&params);
        let grads = g.backward(l).unwrap();
        for (k, id) in ids.iter().enumerate() {
            let analytic = g.value(grads.get(*id).unwrap()).unwrap().data().to_vec();
            let fd = finite_diff(&f, &params, k, 1e-5);
            let e = rel_err(&analytic, &fd);
            assert!(e < 1e-6, "param {k}: relative error {e}");
        }
    }
}

#[test]
fn shape_ops_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let params = vec![random(&[3, 4], &mut rng), random(&[3, 2], &mut rng)];
    let build = |ps: &[Tensor]| -> (Graph, NodeId, Vec<NodeId>) {
        let mut g = Graph::new();
        let a = g.param(ps[0].clone());
        let b = g.param(ps[1].clone());
        let c = g.concat(&[a, b, a]).unwrap();
        let s = g.slice(c, 1, 7).unwrap();
        let e = g.exp(s).unwrap();
        let sm = g.softmax(e).unwrap();
        let n = g.l2_norm_rows(c).unwrap();
        let sq = g.add_scalar(n, 1.0).unwrap();
        let lg = g.log(sq).unwrap();
        let r = g.sqrt(sq).unwrap();
        let q = g.div(lg, r).unwrap();
        let t = g.transpose(sm).unwrap();
        let mm = g.matmul_t(t, sm, false, false).unwrap();
        let neg = g.neg(mm).unwrap();
        let s1 = g.sum(neg).unwrap();
        let s2 = g.sum(q).unwrap();
        let l = g.sub(s1, s2).unwrap();
        (g, l, vec![a, b])
    };
    let f = |ps: &[Tensor]| {
        let (g, l, _) = build(ps);
        g.scalar(l).unwrap()
    };
    let (mut g, l, ids) = build(&params);
    let grads = g.backward(l).unwrap();
    for (k, id) in ids.iter().enumerate() {
        let analytic = g.value(grads.get(*id).unwrap()).unwrap().data().to_vec();
        let fd = finite_diff(&f, &params, k, 1e-5);
        let e = rel_err(&analytic, &fd);
        assert!(e < 1e-6, "param {k}: relative error {e}");
    }
}

#[test]
fn backward_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = random(&[3, 3], &mut rng);
    let x = random(&[4, 3], &mut rng);
    let (a, b) = (0.7, -2.5);
    let grad_of = |mix: Option<(f64, f64)>, which: usize| -> Vec<f64> {
        let mut g = Graph::new();
        let wi = g.param(w.clone());
        let xi = g.input(x.clone());
        let h = g.matmul(xi, wi).unwrap();
        let th = g.tanh(h).unwrap();
        let f = g.sum(th).unwrap();
        let sq = g.square(h).unwrap();
        let gg = g.mean(sq).unwrap();
        let root = match (mix, which) {
            (Some((a, b)), _) => {
                let fa = g.scale(f, a).unwrap();
                let gb = g.scale(gg, b).unwrap();
                g.add(fa, gb).unwrap()
            }
            (None, 0) => f,
            _ => gg,
        };
        let grads = g.backward(root).unwrap();
        g.value(grads.get(wi).unwrap()).unwrap().data().to_vec()
    };
    let mixed = grad_of(Some((a, b)), 0);
    let gf = grad_of(None, 0);
    let gg = grad_of(None, 1);
    for i in 0..mixed.len() {
        assert!((mixed[i] - (a * gf[i] + b * gg[i])).abs() < 1e-12);
    }
}

#[test]
fn second_order_through_batched_grad_norm() {
    // a 2-layer relu critic; d/dW of mean((‖∇ₓD‖ − 1)²) against finite differences
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[4, 3], &mut rng);
    let params = vec![
        random(&[3, 5], &mut rng),
        random(&[5], &mut rng),
        random(&[5, 1], &mut rng),
        random(&[1], &mut rng),
    ];
    let build = |ps: &[Tensor]| -> (Graph, NodeId, Vec<NodeId>) {
        let mut g = Graph::new();
        let xi = g.param(x.clone());
        let ids: Vec<NodeId> = ps.iter().map(|p| g.param(p.clone())).collect();
        let d = two_layer(&mut g, xi, &ids, Act::Tanh);
        let d = g.sum(d).unwrap();
        let n = g.grad_norm_rows(d, xi, 0.0).unwrap();
        let c = g.add_scalar(n, -1.0).unwrap();
        let c = g.square(c).unwrap();
        let gp = g.mean(c).unwrap();
        (g, gp, ids)
    };
    let f = |ps: &[Tensor]| {
        let (g, l, _) = build(ps);
        g.scalar(l).unwrap()
    };
    let (mut g, l, ids) = build(&params);
    let grads = g.backward(l).unwrap();
    for (k, id) in ids.iter().enumerate().take(3) {
        let analytic = g.value(grads.get(*id).unwrap()).unwrap().data().to_vec();
        let fd = finite_diff(&f, &params, k, 1e-5);
        let e = rel_err(&analytic, &fd);
        assert!(e < 1e-4, "param {k}: relative error {e}");
    }
    // the output bias has no influence on input gradients
    assert!(grads.get(ids[3]).is_none());
}

proptest::proptest! {
    #[test]
    fn gradient_of_sum_of_products(a in proptest::collection::vec(-3.0f64..3.0, 1..8)) {
        let mut g = Graph::new();
        let n = a.len();
        let x = g.param(Tensor::vector(a.clone()));
        let y = g.mul(x, x).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        let d = g.value(grads.get(x).unwrap()).unwrap().data().to_vec();
        proptest::prop_assert_eq!(d.len(), n);
        for (di, ai) in d.iter().zip(&a) {
            proptest::prop_assert!((di - 2.0 * ai).abs() < 1e-12);
        }
    }
}
