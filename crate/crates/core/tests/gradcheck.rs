//! Backward pass against central finite differences, op by op and through
//! a full encoder.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wemoe_core::autodiff::{finite_diff_grad, max_relative_error};
use wemoe_core::vit::{encode_vars, init_params, patchify, EncoderVars, Image, TaskHead, ViTConfig};
use wemoe_core::{Graph, Result, SparseTensor, Tensor, Var};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const FLOOR: f64 = 1e-6;

type Build = dyn for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>;

fn eval(build: &Build, inputs: &[Tensor<f64>]) -> f64 {
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    build(&g, &vars).unwrap().value().item().unwrap()
}

/// Compares the analytic gradient of every input with finite differences.
fn check(label: &str, build: &Build, inputs: Vec<Tensor<f64>>) {
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&g, &vars).unwrap();
    let grads = g.backward(loss).unwrap();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v);
        let numeric = finite_diff_grad(
            |x| {
                let mut probe = inputs.clone();
                probe[i] = x.clone();
                eval(build, &probe)
            },
            &inputs[i],
            H,
        );
        let err = max_relative_error(&analytic, &numeric, FLOOR);
        assert!(err < TOL, "{label}: input {i} relative error {err:e}");
    }
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

/// Fixed random projection to a scalar so every output element matters.
fn project<'g>(y: Var<'g, f64>, seed: u64) -> Result<Var<'g, f64>> {
    let shape = y.shape();
    let w = y.graph().constant(Tensor::randn(&shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)));
    y.mul(w)?.sum()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn elementwise_and_matmul_ops() {
    let mut r = rng(1);
    let (a, b) = (randn(&[3, 4], &mut r), randn(&[4, 5], &mut r));
    check("matmul", &|_, v| project(v[0].matmul(v[1])?, 9), vec![a.clone(), b]);
    let c = randn(&[3, 4], &mut r);
    check("add", &|_, v| project(v[0].add(v[1])?, 9), vec![a.clone(), c.clone()]);
    check("sub", &|_, v| project(v[0].sub(v[1])?, 9), vec![a.clone(), c.clone()]);
    check("mul", &|_, v| project(v[0].mul(v[1])?, 9), vec![a.clone(), c]);
    check("scale", &|_, v| project(v[0].scale(-1.7)?, 9), vec![a.clone()]);
    check("mean", &|_, v| v[0].mul(v[0])?.mean(), vec![a.clone()]);
    check("mean_rows", &|_, v| project(v[0].mean_rows()?, 9), vec![a.clone()]);
    check("gelu", &|_, v| project(v[0].gelu()?, 9), vec![a.scale(2.0)]);
    check("reshape", &|_, v| project(v[0].reshape(&[2, 6])?, 9), vec![a.clone()]);
    check("slice_rows", &|_, v| project(v[0].slice_rows(1, 2)?, 9), vec![a]);
}

#[test]
fn relu_away_from_the_kink() {
    let mut r = rng(2);
    // keep every entry at least 0.1 from zero
    let x = randn(&[4, 6], &mut r).map(|v| if v.abs() < 0.1 { v.signum() * 0.1 + v } else { v });
    check("relu", &|_, v| project(v[0].relu()?, 3), vec![x]);
}

#[test]
fn broadcast_linear_and_rows() {
    let mut r = rng(3);
    let x = randn(&[5, 4], &mut r);
    let w = randn(&[4, 3], &mut r);
    let b = randn(&[3], &mut r);
    check("linear", &|_, v| project(v[0].linear(v[1], v[2])?, 4), vec![x.clone(), w, b.clone()]);
    let row = randn(&[4], &mut r);
    check("add_broadcast", &|_, v| project(v[0].add_broadcast(v[1])?, 4), vec![x.clone(), row]);
    let y = randn(&[2, 4], &mut r);
    check(
        "concat_rows",
        &|g, v| project(g.concat_rows(&[v[0], v[1], v[0]])?, 4),
        vec![x.clone(), y],
    );
    let cls = randn(&[4], &mut r);
    check(
        "prepend_token",
        &|g, v| project(g.prepend_token(v[0], v[1], 5)?, 4),
        vec![x, cls],
    );
}

#[test]
fn normalization_and_softmax() {
    let mut r = rng(4);
    let x = randn(&[4, 8], &mut r);
    let gamma = randn(&[8], &mut r);
    let beta = randn(&[8], &mut r);
    check(
        "layer_norm",
        &|_, v| project(v[0].layer_norm(v[1], v[2], 1e-5)?, 5),
        vec![x.clone(), gamma, beta],
    );
    check("softmax", &|_, v| project(v[0].softmax()?, 5), vec![x]);
}

#[test]
fn attention_op() {
    let mut r = rng(5);
    let (seq, d) = (3, 8);
    let q = randn(&[2 * seq, d], &mut r);
    let k = randn(&[2 * seq, d], &mut r);
    let v = randn(&[2 * seq, d], &mut r);
    check(
        "attention",
        &move |g, x| project(g.attention(x[0], x[1], x[2], seq, 2)?, 6),
        vec![q, k, v],
    );
}

#[test]
fn combine_ops() {
    let mut r = rng(6);
    let base = randn(&[3, 4], &mut r);
    let t0 = randn(&[3, 4], &mut r);
    let t1 = randn(&[3, 4], &mut r);
    let coeffs = randn(&[2], &mut r);
    check(
        "combine",
        &|g, v| project(g.combine(v[0], &[v[1], v[2]], v[3])?, 7),
        vec![base.clone(), t0, t1, coeffs.clone()],
    );
    let sparse: Vec<Arc<SparseTensor<f64>>> = (0..2)
        .map(|_| {
            let dense = randn(&[3, 4], &mut r).map(|x| if x.abs() < 0.7 { 0.0 } else { x });
            Arc::new(SparseTensor::from_dense(&dense))
        })
        .collect();
    check(
        "sparse_combine",
        &move |g, v| project(g.sparse_combine(v[0], &sparse, v[1])?, 7),
        vec![base, coeffs],
    );
}

#[test]
fn sparse_matmul_op() {
    let mut r = rng(7);
    let x = randn(&[5, 6], &mut r);
    let dense = randn(&[6, 3], &mut r).map(|v| if v.abs() < 0.5 { 0.0 } else { v });
    let s = Arc::new(SparseTensor::from_dense(&dense));
    check("matmul_sparse", &move |_, v| project(v[0].matmul_sparse(&s)?, 8), vec![x]);
}

#[test]
fn losses() {
    let mut r = rng(8);
    let logits = randn(&[4, 5], &mut r);
    check("cross_entropy", &|g, v| g.cross_entropy(v[0], &[0, 3, 4, 1]), vec![logits.clone()]);
    check("entropy", &|g, v| g.entropy(v[0].softmax()?), vec![logits]);
}

#[test]
fn composite_graph() {
    let mut r = rng(9);
    let x = randn(&[6, 4], &mut r);
    let w = randn(&[4, 4], &mut r);
    let gamma = randn(&[4], &mut r);
    let beta = randn(&[4], &mut r);
    check(
        "composite",
        &|g, v| {
            let h = v[0].matmul(v[1])?.gelu()?.layer_norm(v[2], v[3], 1e-5)?;
            let p = h.add(v[0])?.softmax()?;
            g.entropy(p)
        },
        vec![x, w, gamma, beta],
    );
}

/// Cross-entropy of a tiny encoder with a head, differentiated with respect
/// to each tensor of one block.
#[test]
fn encoder_cross_entropy_wrt_block_weights() {
    let cfg = ViTConfig {
        image_size: 8,
        patch_size: 4,
        channels: 1,
        d_model: 8,
        n_heads: 2,
        n_blocks: 2,
        mlp_hidden: 16,
        ln_eps: 1e-5,
    };
    let mut r = rng(10);
    let tree = init_params::<f64, _>(&cfg, &mut r).unwrap();
    let head = TaskHead::<f64>::random(0, cfg.d_model, 3, &mut r);
    let images: Vec<Image> = (0..3)
        .map(|_| {
            let px = (0..cfg.image_size * cfg.image_size).map(|_| r.random::<f32>()).collect();
            Image::new(cfg.image_size, cfg.channels, px).unwrap()
        })
        .collect();
    let refs: Vec<&Image> = images.iter().collect();
    let patches = patchify::<f64>(&cfg, &refs).unwrap();
    let labels = [0usize, 2, 1];

    let loss_of = |tree: &wemoe_core::ParamTree<f64>, target: &str, g: &Graph<f64>| -> (f64, Option<Tensor<f64>>) {
        let trainable = |n: &str| n == target;
        let enc = EncoderVars::bind(g, &cfg, tree, &trainable).unwrap();
        let feats = encode_vars(g.constant(patches.clone()), &enc, &cfg, refs.len()).unwrap();
        let loss = g.cross_entropy(head.logits_var(g, feats).unwrap(), &labels).unwrap();
        let value = loss.value().item().unwrap();
        let grad = g.backward(loss).ok().and_then(|gr| {
            let blk = &enc.blocks[1];
            let locals = [
                ("ln1.gamma", blk.ln1.gamma), ("ln1.beta", blk.ln1.beta),
                ("att.wq", blk.att.wq), ("att.bq", blk.att.bq), ("att.wk", blk.att.wk), ("att.bk", blk.att.bk),
                ("att.wv", blk.att.wv), ("att.bv", blk.att.bv), ("att.wo", blk.att.wo), ("att.bo", blk.att.bo),
                ("ln2.gamma", blk.ln2.gamma), ("ln2.beta", blk.ln2.beta),
                ("mlp.w0", blk.mlp.w0), ("mlp.b0", blk.mlp.b0), ("mlp.w1", blk.mlp.w1), ("mlp.b1", blk.mlp.b1),
            ];
            let found = locals.iter().find(|(l, _)| format!("blocks.01.{l}") == target);
            found.map(|(_, var)| gr.wrt(*var))
        });
        (value, grad)
    };

    let names: Vec<String> = tree.names().filter(|n| n.starts_with("blocks.01.")).map(String::from).collect();
    assert_eq!(names.len(), 16);
    for name in names {
        let g = Graph::new();
        let (_, analytic) = loss_of(&tree, &name, &g);
        let analytic = analytic.unwrap();
        let numeric = finite_diff_grad(
            |x| {
                let mut t = tree.clone();
                *t.get_mut(&name).unwrap() = x.clone();
                loss_of(&t, "", &Graph::new()).0
            },
            tree.get(&name).unwrap(),
            H,
        );
        let err = max_relative_error(&analytic, &numeric, FLOOR);
        assert!(err < TOL, "{name}: relative error {err:e}");
    }
}

proptest::proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]

    #[test]
    fn random_shapes_match_finite_differences(rows in 1usize..6, cols in 2usize..8, seed in 0u64..1000) {
        let mut r = rng(seed);
        let x = randn(&[rows, cols], &mut r);
        let w = randn(&[cols, cols], &mut r);
        let gamma = randn(&[cols], &mut r);
        let beta = randn(&[cols], &mut r);
        check(
            "random composite",
            &|g, v| {
                let h = v[0].matmul(v[1])?.gelu()?.layer_norm(v[2], v[3], 1e-5)?;
                g.entropy(h.softmax()?)
            },
            vec![x, w, gamma, beta],
        );
    }
}
