use ndarray::{array, Array2};

use super::gradcheck::check_params;
use super::*;
use crate::params::{Component, Initializer, ParamStore};
use crate::seed;

fn random_store(shapes: &[(&str, (usize, usize))], seed_val: u64) -> ParamStore<f64> {
    let mut init = Initializer::new(seed::rng(&[seed_val]));
    let mut store = ParamStore::new();
    for (name, (r, c)) in shapes {
        store.add(*name, Component::Heads, init.uniform(*r, *c, 1.0));
    }
    store
}

fn assert_grads(store: &ParamStore<f64>, loss: impl Fn(&mut Graph<f64>) -> Var) {
    let report = check_params(store, loss, 1e-5, 1e-6, usize::MAX);
    assert!(
        report.max_rel_error < 1e-6,
        "max rel err {} at {}",
        report.max_rel_error,
        report.worst_param
    );
}

/// Reduces any node to a scalar with a fixed random readout so every
/// output element carries a distinct gradient.
fn readout(g: &mut Graph<f64>, x: Var) -> Var {
    let (r, c) = g.shape(x);
    let w = Array2::from_shape_fn((r, c), |(i, j)| ((i * 7 + j * 3) % 11) as f64 / 11.0 - 0.4);
    let w = g.input(w);
    let y = g.mul(x, w);
    let y = g.mean_rows(y);
    let ones = g.input(Array2::ones((c, 1)));
    g.matmul(y, ones)
}

#[test]
fn elementwise_and_matmul_grads() {
    let store = random_store(&[("a", (3, 4)), ("b", (4, 5)), ("bias", (1, 5)), ("c", (3, 5))], 1);
    let ids: Vec<_> = store.ids().collect();
    assert_grads(&store, |g| {
        let a = g.param(ids[0]);
        let b = g.param(ids[1]);
        let bias = g.param(ids[2]);
        let c = g.param(ids[3]);
        let y = g.matmul(a, b);
        let y = g.add_bias(y, bias);
        let y = g.gelu(y);
        let z = g.sigmoid(c);
        let y = g.mul(y, z);
        let s = g.silu(c);
        let y = g.add(y, s);
        let y = g.scale(y, 0.7);
        readout(g, y)
    });
}

#[test]
fn layer_norm_concat_slice_mean_grads() {
    let store = random_store(&[("x", (4, 6)), ("gamma", (1, 6)), ("beta", (1, 6))], 2);
    let ids: Vec<_> = store.ids().collect();
    assert_grads(&store, |g| {
        let x = g.param(ids[0]);
        let (ga, be) = (g.param(ids[1]), g.param(ids[2]));
        let y = g.layer_norm(x, ga, be);
        let a = g.slice_cols(y, 0, 2);
        let b = g.slice_cols(y, 3, 3);
        let cat = g.concat_cols(a, b);
        let m = g.mean_rows(cat);
        let m = g.broadcast_rows(m, 4);
        let out = g.add(cat, m);
        readout(g, out)
    });
}

#[test]
fn attention_and_rotary_grads() {
    let store = random_store(&[("q", (5, 8)), ("k", (5, 8)), ("v", (5, 8))], 3);
    let ids: Vec<_> = store.ids().collect();
    assert_grads(&store, |g| {
        let q = g.param(ids[0]);
        let k = g.param(ids[1]);
        let v = g.param(ids[2]);
        let q = g.rotary(q, 2);
        let k = g.rotary(k, 2);
        let o = g.attention(q, k, v, 2);
        readout(g, o)
    });
}

#[test]
fn conv_grads() {
    let store = random_store(
        &[("x", (13, 2)), ("w", (8, 3)), ("b", (1, 3)), ("dw", (3, 3)), ("db", (1, 3))],
        4,
    );
    let ids: Vec<_> = store.ids().collect();
    assert_grads(&store, |g| {
        let x = g.param(ids[0]);
        let w = g.param(ids[1]);
        let b = g.param(ids[2]);
        let y = g.conv1d(x, w, b, 4, 2, 1, 1);
        let (dw, db) = (g.param(ids[3]), g.param(ids[4]));
        let y = g.depthwise_conv(y, dw, db);
        readout(g, y)
    });
}

#[test]
fn loss_grads() {
    let store = random_store(&[("logits", (4, 5)), ("pred", (4, 3))], 5);
    let ids: Vec<_> = store.ids().collect();
    let target = Array2::from_shape_fn((4, 3), |(i, j)| (i as f64 - j as f64) * 0.3);
    assert_grads(&store, |g| {
        let l = g.param(ids[0]);
        let p = g.param(ids[1]);
        let ce = g.masked_cross_entropy(l, &[0, 4, 2, 1], &[1, 3]);
        let mse = g.masked_mse(p, target.clone(), &[0, 3]);
        g.add(ce, mse)
    });
}

#[test]
fn conv_output_length_and_padding() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::eval(&store);
    let x = g.input(Array2::from_shape_fn((10, 1), |(i, _)| i as f64));
    let w = g.input(array![[1.0], [1.0]]);
    let b = g.input(array![[0.0]]);
    // kernel 2, stride 2, no padding: pairwise sums
    let y = g.conv1d(x, w, b, 2, 2, 0, 0);
    assert_eq!(g.value(y).column(0).to_vec(), vec![1.0, 5.0, 9.0, 13.0, 17.0]);
    assert_eq!(g.flops(), 2 * 5 * 2);
}

#[test]
fn dropout_is_identity_in_eval_and_scaled_in_training() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::eval(&store);
    let x = g.input(Array2::ones((50, 40)));
    let y = g.dropout(x, 0.5);
    assert_eq!(x, y);

    let mut g = Graph::training(&store, seed::rng(&[9]));
    let x = g.input(Array2::ones((50, 40)));
    let y = g.dropout(x, 0.25);
    let vals = g.value(y);
    assert!(vals.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-12));
    let kept = vals.iter().filter(|&&v| v != 0.0).count() as f64 / 2000.0;
    assert!((kept - 0.75).abs() < 0.05, "kept fraction {kept}");
}

#[test]
fn uniform_logits_cross_entropy_is_log_vocab() {
    let store = ParamStore::<f32>::new();
    let mut g = Graph::eval(&store);
    let logits = g.input(Array2::from_elem((3, 8192), 0.37f32));
    let ce = g.masked_cross_entropy(logits, &[5, 17, 8191], &[0, 2]);
    assert!((g.scalar(ce) as f64 - 8192f64.ln()).abs() < 1e-4);
}

#[test]
fn blocked_attention_matches_full_score_matrix() {
    let mut init = Initializer::new(seed::rng(&[77]));
    let (q, k, v) = (init.uniform(600, 8, 1.0), init.uniform(600, 8, 1.0), init.uniform(600, 8, 1.0));
    let out: Array2<f64> = kernels::attention_forward(q.view(), k.view(), v.view(), 2);
    let weights = kernels::attention_weights(q.view(), k.view(), 2);
    for (h, p) in weights.iter().enumerate() {
        let expected = p.dot(&v.slice(ndarray::s![.., h * 4..(h + 1) * 4]));
        let got = out.slice(ndarray::s![.., h * 4..(h + 1) * 4]);
        let dev = (&got - &expected).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(dev < 1e-12, "head {h}: {dev}");
    }
}
