//! Central-difference gradient checks for every differentiable graph op.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sar_core::masks::{gen_masks, BoolMatrix};
use sar_core::numerics::{Graph, RopeTable, Tensor, Var};
use sar_core::schedule::OutputIntervals;

pub const H: f32 = 1e-3;
pub const REL_TOL: f32 = 1e-3;

pub fn uniform(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap()
}

/// Projects the op output onto a fixed random tensor so the scalar depends
/// on every output entry.
fn project(g: &mut Graph, out: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = uniform(g.value(out).shape().to_vec(), &mut rng);
    let r = g.leaf(r, false);
    let p = g.mul(out, r).unwrap();
    g.sum(p).unwrap()
}

/// Largest |analytic - numeric| over the largest magnitude of either, per input.
pub fn grad_check(inputs: &[Tensor], build: impl Fn(&mut Graph, &[Var]) -> Var) -> Vec<f32> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = build(&mut g, &vars);
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f32>> = vars
        .iter()
        .map(|&v| g.grad(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; g.value(v).len()]))
        .collect();

    let eval = |inputs: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let l = build(&mut g, &vars);
        g.value(l).data()[0]
    };
    let mut errors = Vec::new();
    for (i, input) in inputs.iter().enumerate() {
        let mut max_diff = 0.0f32;
        let mut scale = 0.0f32;
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
            max_diff = max_diff.max((numeric - analytic[i][j]).abs());
            scale = scale.max(analytic[i][j].abs()).max(numeric.abs());
        }
        errors.push(if scale == 0.0 { max_diff } else { max_diff / scale });
    }
    errors
}

fn unary(name: &'static str, seed: u64, f: fn(&mut Graph, Var) -> Var) -> (&'static str, Vec<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = uniform(vec![4, 4], &mut rng);
    (name, grad_check(&[a], |g, v| {
        let o = f(g, v[0]);
        project(g, o, seed + 100)
    }))
}

fn binary(name: &'static str, seed: u64, b_shape: Vec<usize>, f: fn(&mut Graph, Var, Var) -> Var) -> (&'static str, Vec<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = uniform(vec![4, 4], &mut rng);
    let b = uniform(b_shape, &mut rng);
    (name, grad_check(&[a, b], |g, v| {
        let o = f(g, v[0], v[1]);
        project(g, o, seed + 100)
    }))
}

/// Relative error per input of every differentiable op.
pub fn op_checks() -> Vec<(&'static str, Vec<f32>)> {
    let mut out = vec![
        binary("matmul", 1, vec![4, 4], |g, a, b| g.matmul(a, b).unwrap()),
        binary("add", 2, vec![4, 4], |g, a, b| g.add(a, b).unwrap()),
        binary("mul", 3, vec![4, 4], |g, a, b| g.mul(a, b).unwrap()),
        binary("add_bias", 4, vec![4], |g, a, b| g.add_bias(a, b).unwrap()),
        binary("rmsnorm", 5, vec![4], |g, a, b| g.rmsnorm(a, b).unwrap()),
        unary("silu", 6, |g, a| g.silu(a).unwrap()),
        unary("sum", 7, |g, a| g.sum(a).unwrap()),
    ];

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let table = uniform(vec![5, 4], &mut rng);
    let other = uniform(vec![2, 4], &mut rng);
    out.push(("embedding+concat", grad_check(&[table, other], |g, v| {
        let e = g.embedding(v[0], &[3, 1, 3, 0]).unwrap();
        let o = g.concat_segments(&[(v[1], 1), (e, 2)], 2).unwrap();
        project(g, o, 108)
    })));

    let x = uniform(vec![4, 4], &mut rng);
    let mask = BoolMatrix::from_fn(4, 4, |r, c| c <= r || (r == 1 && c == 3));
    out.push(("masked_softmax", grad_check(&[x], |g, v| {
        let o = g.masked_softmax(v[0], &mask).unwrap();
        project(g, o, 109)
    })));

    let logits = uniform(vec![4, 4], &mut rng);
    out.push(("cross_entropy", grad_check(&[logits], |g, v| {
        g.cross_entropy(v[0], &[2, 0, 3, 1], &[1.0, 0.0, 1.0, 1.0]).unwrap()
    })));

    let x = uniform(vec![4, 8], &mut rng);
    let angles: Vec<f32> = (0..4 * 2).map(|i| i as f32 * 0.37).collect();
    let rope = Arc::new(RopeTable::from_angles(&angles, 2));
    out.push(("rope", grad_check(&[x], |g, v| {
        let o = g.rope(v[0], rope.clone(), 4, 4).unwrap();
        project(g, o, 110)
    })));

    // two sequences, 4 queries x 3 keys, width 8, two heads
    let q = uniform(vec![8, 8], &mut rng);
    let k = uniform(vec![6, 8], &mut rng);
    let v = uniform(vec![6, 8], &mut rng);
    let cross = gen_masks(&OutputIntervals::new(vec![1, 2, 1]).unwrap()).unwrap().decoder_cross;
    let mask = BoolMatrix::from_fn(4, 3, |r, c| cross.get(r, c));
    out.push(("attention (masked)", grad_check(&[q.clone(), k.clone(), v.clone()], |g, vs| {
        let o = g.attention(vs[0], vs[1], vs[2], 2, 2, Some(&mask)).unwrap();
        project(g, o, 111)
    })));
    out.push(("attention (full)", grad_check(&[q, k, v], |g, vs| {
        let o = g.attention(vs[0], vs[1], vs[2], 2, 2, None).unwrap();
        project(g, o, 112)
    })));
    out
}
