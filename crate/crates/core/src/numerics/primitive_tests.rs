//! Finite-difference checks for every primitive's backward rule.

use std::rc::Rc;

use rand::Rng;
use rand_distr::StandardNormal;

use super::*;

fn random(shape: &[usize], rng: &mut SeededRng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

fn positive(shape: &[usize], rng: &mut SeededRng) -> Tensor<f64> {
    random(shape, rng).map(|v| 0.5 + v.abs())
}

/// Builds `sum(w ⊙ op(inputs))` for fixed random `w`, checks every input's
/// gradient against central differences.
fn check<F>(inputs: Vec<Tensor<f64>>, build: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, crate::Error>,
{
    let mut rng = SeededRng::new(99, Stream::Eval);
    let eval = |inputs: &[Tensor<f64>], weights: Option<&Tensor<f64>>| {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| g.param(&format!("x{i}"), t.clone()))
            .collect();
        let out = build(&mut g, &vars).unwrap();
        let shape = g.shape(out).to_vec();
        (g, vars, out, shape, weights.cloned())
    };
    let (_, _, _, out_shape, _) = eval(&inputs, None);
    let w = random(&out_shape, &mut rng);
    let loss_of = |inputs: &[Tensor<f64>]| -> f64 {
        let (g, _, out, _, _) = eval(inputs, Some(&w));
        g.value(out).data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    };
    let (mut g, vars, out, _, _) = eval(&inputs, Some(&w));
    let wv = g.constant(w.clone());
    let prod = g.mul(out, wv).unwrap();
    let loss = g.sum(prod).unwrap();
    let grads = g.backward(loss).unwrap();

    let h = 1e-5;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for j in 0..inputs[i].numel() {
            let mut up = inputs.clone();
            up[i].data_mut()[j] += h;
            let mut down = inputs.clone();
            down[i].data_mut()[j] -= h;
            let numeric = (loss_of(&up) - loss_of(&down)) / (2.0 * h);
            let err = (analytic.data()[j] - numeric).abs() / numeric.abs().max(1.0);
            assert!(
                err < 1e-6,
                "input {i} coord {j}: analytic {} numeric {numeric}",
                analytic.data()[j]
            );
        }
    }
}

fn rng() -> SeededRng {
    SeededRng::new(5, Stream::Eval)
}

#[test]
fn elementwise_binary() {
    let mut r = rng();
    let a = random(&[3, 4], &mut r);
    let b = random(&[3, 4], &mut r);
    check(vec![a.clone(), b.clone()], |g, v| g.add(v[0], v[1]));
    check(vec![a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]));
    check(vec![a.clone(), b], |g, v| g.mul(v[0], v[1]));
    check(vec![a, positive(&[3, 4], &mut r)], |g, v| g.div(v[0], v[1]));
}

#[test]
fn scalar_and_row_ops() {
    let mut r = rng();
    let a = random(&[4, 3], &mut r);
    check(vec![a.clone()], |g, v| g.scale(v[0], 1.7));
    check(vec![a.clone()], |g, v| g.add_scalar(v[0], -0.3));
    check(vec![a.clone(), random(&[3], &mut r)], |g, v| g.add_row(v[0], v[1]));
    check(vec![a.clone()], |g, v| g.scale_rows(v[0], Rc::new(vec![0.5, 0.0, 2.0, -1.0])));
    check(vec![random(&[1, 3], &mut r)], |g, v| g.broadcast_row(v[0], 4));
}

#[test]
fn matmul_transpose_reshape() {
    let mut r = rng();
    check(vec![random(&[2, 3], &mut r), random(&[3, 4], &mut r)], |g, v| g.matmul(v[0], v[1]));
    check(vec![random(&[3, 4], &mut r)], |g, v| g.transpose(v[0]));
    check(vec![random(&[3, 4], &mut r)], |g, v| g.reshape(v[0], &[2, 6]));
}

#[test]
fn concat_slice_split() {
    let mut r = rng();
    let a = random(&[2, 3], &mut r);
    let b = random(&[2, 2], &mut r);
    check(vec![a.clone(), b.clone()], |g, v| g.concat(&[v[0], v[1]], Axis::Cols));
    let c = random(&[1, 3], &mut r);
    check(vec![a.clone(), c], |g, v| g.concat(&[v[0], v[1]], Axis::Rows));
    check(vec![random(&[3, 5], &mut r)], |g, v| g.slice(v[0], Axis::Cols, 1, 3));
    check(vec![random(&[4, 2], &mut r)], |g, v| g.slice(v[0], Axis::Rows, 1, 2));
    check(vec![random(&[2, 5], &mut r)], |g, v| {
        let parts = g.split(v[0], Axis::Cols, &[2, 3])?;
        let p = g.scale(parts[1], 2.0)?;
        g.concat(&[p, parts[0]], Axis::Cols)
    });
}

#[test]
fn gather_scatter() {
    let mut r = rng();
    check(vec![random(&[3, 2], &mut r)], |g, v| g.gather_rows(v[0], Rc::new(vec![2, 0, 2, 1])));
    check(vec![random(&[2, 3], &mut r)], |g, v| g.scatter_rows(v[0], Rc::new(vec![3, 1]), 4));
}

#[test]
fn softmax_layernorm_unary() {
    let mut r = rng();
    check(vec![random(&[3, 4], &mut r)], |g, v| g.softmax(v[0]));
    check(
        vec![random(&[3, 4], &mut r), random(&[4], &mut r), random(&[4], &mut r)],
        |g, v| g.layer_norm(v[0], Some(v[1]), Some(v[2]), 1e-6),
    );
    check(vec![random(&[2, 5], &mut r)], |g, v| g.layer_norm(v[0], None, None, 1e-6));
    for kind in [Unary::Gelu, Unary::Silu, Unary::Exp, Unary::Tanh, Unary::Neg] {
        check(vec![random(&[2, 4], &mut r)], move |g, v| g.unary(v[0], kind));
    }
    check(vec![positive(&[2, 3], &mut r)], |g, v| g.unary(v[0], Unary::Log));
}

#[test]
fn reductions() {
    let mut r = rng();
    check(vec![random(&[3, 3], &mut r)], |g, v| g.sum(v[0]));
    check(vec![random(&[2, 7], &mut r)], |g, v| g.mean(v[0]));
}

fn attention_layout(heads: usize, lens: &[usize], with_bias: bool, extent: usize) -> Rc<AttentionLayout> {
    let mut start = 0;
    let segments = lens
        .iter()
        .map(|&n| {
            let seg = Segment {
                start,
                len: n,
                bias_index: with_bias.then(|| Rc::new((0..n * n).map(|k| (k * 7 + n) % extent).collect())),
            };
            start += n;
            seg
        })
        .collect();
    Rc::new(AttentionLayout { heads, segments })
}

#[test]
fn attention_backward() {
    let mut r = rng();
    let layout = attention_layout(2, &[3, 2], true, 5);
    let l2 = layout.clone();
    check(vec![random(&[5, 12], &mut r), random(&[2, 5], &mut r)], move |g, v| {
        g.attention(v[0], Some(v[1]), l2.clone())
    });
    let plain = attention_layout(1, &[4], false, 1);
    check(vec![random(&[4, 6], &mut r)], move |g, v| g.attention(v[0], None, plain.clone()));
}

/// The fused attention agrees with the same computation written in primitives.
#[test]
fn attention_matches_composed_primitives() {
    let mut r = rng();
    let heads = 2;
    let n = 4;
    let dh = 3;
    let d = heads * dh;
    let qkv = random(&[n, 3 * d], &mut r);
    let table = random(&[heads, 6], &mut r);
    let layout = attention_layout(heads, &[n], true, 6);
    let index = layout.segments[0].bias_index.clone().unwrap();

    let mut g = Graph::<f64>::new();
    let x = g.constant(qkv);
    let t = g.constant(table.clone());
    let fused = g.attention(x, Some(t), layout).unwrap();

    let mut outs = Vec::new();
    for h in 0..heads {
        let q = g.slice(x, Axis::Cols, h * dh, dh).unwrap();
        let k = g.slice(x, Axis::Cols, d + h * dh, dh).unwrap();
        let v = g.slice(x, Axis::Cols, 2 * d + h * dh, dh).unwrap();
        let kt = g.transpose(k).unwrap();
        let s = g.matmul(q, kt).unwrap();
        let s = g.scale(s, 1.0 / (dh as f64).sqrt()).unwrap();
        let bias: Vec<f64> = index.iter().map(|&i| table.row(h)[i]).collect();
        let b = g.constant(Tensor::new(vec![n, n], bias).unwrap());
        let s = g.add(s, b).unwrap();
        let p = g.softmax(s).unwrap();
        outs.push(g.matmul(p, v).unwrap());
    }
    let composed = g.concat(&outs, Axis::Cols).unwrap();
    for (a, b) in g.value(fused).data().iter().zip(g.value(composed).data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn softmax_of_equal_entries_is_uniform() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(&[1, 5], 3.0));
    let y = g.softmax(x).unwrap();
    for &v in g.value(y).data() {
        assert!((v - 0.2).abs() < 1e-15);
    }
}

#[test]
fn gather_then_scatter_restores_disjoint_rows() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64(&[3, 2], &[1., 2., 3., 4., 5., 6.]).unwrap());
    let idx = Rc::new(vec![2, 0]);
    let picked = g.gather_rows(x, idx.clone()).unwrap();
    assert_eq!(g.value(picked).data(), &[5., 6., 1., 2.]);
    let back = g.scatter_rows(picked, idx, 3).unwrap();
    assert_eq!(g.value(back).data(), &[1., 2., 0., 0., 5., 6.]);
}

#[test]
fn concat_then_split_is_identity() {
    let mut r = rng();
    for axis in [Axis::Rows, Axis::Cols] {
        let a = random(&[2, 3], &mut r);
        let b = random(&[2, 3], &mut r);
        let mut g = Graph::<f64>::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let c = g.concat(&[va, vb], axis).unwrap();
        let widths = if axis == Axis::Rows { [2, 2] } else { [3, 3] };
        let parts = g.split(c, axis, &widths).unwrap();
        assert_eq!(g.value(parts[0]), &a);
        assert_eq!(g.value(parts[1]), &b);
    }
}

#[test]
fn shape_errors_name_primitive_and_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 4]));
    let err = g.add(a, b).unwrap_err().to_string();
    assert!(err.contains("add") && err.contains("[2, 3]") && err.contains("[2, 4]"), "{err}");
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("matmul"), "{err}");
}

#[test]
fn unused_parameters_get_exact_zero() {
    let mut g = Graph::<f64>::new();
    let a = g.param("a", Tensor::full(&[2], 2.0));
    let _b = g.param("b", Tensor::full(&[3], 1.0));
    let s = g.mul(a, a).unwrap();
    let loss = g.sum(s).unwrap();
    let grads = g.backward(loss).unwrap();
    let named = g.param_grads(&grads);
    assert_eq!(named["a"].data(), &[4.0, 4.0]);
    assert_eq!(named["b"].data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn finite_checks_flag_nan() {
    let mut g = Graph::<f64>::new().with_finite_checks();
    let a = g.constant(Tensor::full(&[2], -1.0));
    let err = g.unary(a, Unary::Log).unwrap_err();
    assert!(matches!(err, crate::Error::NonFinite(_)));
}

proptest::proptest! {
    #[test]
    fn softmax_rows_sum_to_one(values in proptest::collection::vec(-30.0f64..30.0, 2..16)) {
        let n = values.len();
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![1, n], values).unwrap());
        let y = g.softmax(x).unwrap();
        let s: f64 = g.value(y).data().iter().sum();
        proptest::prop_assert!((s - 1.0).abs() < 1e-12);
    }
}
