//! Finite-difference checks of every differentiable graph op, plus a few
//! closed-form values.

mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sar_core::masks::BoolMatrix;
use sar_core::numerics::{Graph, Tensor};

use common::gradcheck::{op_checks, uniform, REL_TOL};

#[test]
fn every_op_matches_central_differences() {
    for (name, errors) in op_checks() {
        for (i, e) in errors.iter().enumerate() {
            assert!(*e <= REL_TOL, "{name}: input {i} relative error {e}");
        }
    }
}

#[test]
fn rmsnorm_of_constant_vector_is_gain() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::full(vec![1, 8], 3.0), false);
    let gain = g.leaf(Tensor::new(vec![8], (0..8).map(|i| i as f32).collect()).unwrap(), false);
    let y = g.rmsnorm(x, gain).unwrap();
    for (i, v) in g.value(y).data().iter().enumerate() {
        assert!((v - i as f32).abs() < 1e-5);
    }
}

#[test]
fn masked_softmax_rows_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = uniform(vec![4, 4], &mut rng);
    let mask = BoolMatrix::from_fn(4, 4, |r, c| c <= r || (r == 1 && c == 3));
    let mut g = Graph::new();
    let xv = g.leaf(x, false);
    let p = g.masked_softmax(xv, &mask).unwrap();
    for r in 0..4 {
        let row = g.value(p).row(r);
        let s: f32 = row.iter().sum();
        assert!((s - 1.0).abs() <= 1e-6);
        for c in 0..4 {
            if !mask.get(r, c) {
                assert_eq!(row[c], 0.0);
            }
        }
    }
    let empty = BoolMatrix::from_fn(4, 4, |r, _| r != 2);
    let xv2 = g.leaf(Tensor::zeros(vec![4, 4]), false);
    assert!(g.masked_softmax(xv2, &empty).is_err());
}

#[test]
fn cross_entropy_closed_form() {
    // direct formula on a 3-row case
    let rows = [[0.2f64, -1.0, 0.5], [1.5, 0.0, -0.3], [-0.7, 0.9, 0.1]];
    let t = [1usize, 0, 2];
    let expected: f64 = rows
        .iter()
        .zip(t)
        .map(|(r, t)| {
            let z: f64 = r.iter().map(|x| x.exp()).sum();
            -(r[t].exp() / z).ln()
        })
        .sum::<f64>()
        / 3.0;
    let mut g = Graph::new();
    let l = g.leaf(
        Tensor::new(vec![3, 3], rows.iter().flatten().map(|&x| x as f32).collect()).unwrap(),
        false,
    );
    let loss = g.cross_entropy(l, &t, &[1.0; 3]).unwrap();
    assert!((g.value(loss).data()[0] as f64 - expected).abs() < 1e-6);

    // uniform logits give ln V, a dominant correct logit gives ~0
    let u = g.leaf(Tensor::zeros(vec![2, 7]), false);
    let loss = g.cross_entropy(u, &[3, 5], &[1.0, 1.0]).unwrap();
    assert!((g.value(loss).data()[0] - 7f32.ln()).abs() < 1e-6);
    let mut big = Tensor::zeros(vec![1, 4]);
    big.data_mut()[2] = 100.0;
    let b = g.leaf(big, false);
    let loss = g.cross_entropy(b, &[2], &[1.0]).unwrap();
    assert!(g.value(loss).data()[0] < 1e-6);
    assert!(g.cross_entropy(b, &[2], &[0.0]).is_err());
}

#[test]
fn shape_errors() {
    let mut g = Graph::new();
    let a = g.leaf(Tensor::zeros(vec![2, 3]), false);
    let b = g.leaf(Tensor::zeros(vec![2, 3]), false);
    assert!(g.matmul(a, b).is_err());
    let c = g.leaf(Tensor::zeros(vec![3, 2]), false);
    assert!(g.add(a, c).is_err());
    assert!(g.mul(a, c).is_err());
    assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
}
