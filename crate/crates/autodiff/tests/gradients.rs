//! Every op kind against central finite differences on random inputs.

use autodiff::{apply, grad_check, Op, Result, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TRIALS: usize = 100;
const STEP: f64 = 1e-6;
const TOL: f64 = 1e-3;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

/// Checks `sum(op(params) * w)` for a fixed random weighting `w`.
fn check_op<G, F>(name: &str, seed: u64, gen: G, op: F)
where
    G: Fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..TRIALS {
        let params = gen(&mut rng);
        let mut dry = Tape::inference();
        let vars: Vec<Var> = params.iter().map(|p| dry.param(p.clone())).collect();
        let out = op(&mut dry, &vars).unwrap();
        let shape = dry.value(out).shape().to_vec();
        let weights = if shape.is_empty() {
            Tensor::scalar(rng.random_range(0.5..1.5))
        } else {
            rand_tensor(&mut rng, &shape)
        };
        let err = grad_check(
            |t, v| {
                let y = op(t, v)?;
                let w = t.constant(weights.clone());
                let p = t.mul(y, w)?;
                t.sum_all(p)
            },
            &params,
            STEP,
        )
        .unwrap();
        worst = worst.max(err);
    }
    println!("{name:>18}: max relative error {worst:.3e}");
    assert!(worst <= TOL, "{name}: {worst}");
}

#[test]
fn matmul_all_transposes() {
    for (i, (ta, tb)) in [(false, false), (false, true), (true, false), (true, true)].into_iter().enumerate() {
        check_op(
            "matmul",
            10 + i as u64,
            |r| {
                let a = if ta { [4, 3] } else { [3, 4] };
                let b = if tb { [2, 4] } else { [4, 2] };
                vec![rand_tensor(r, &a), rand_tensor(r, &b)]
            },
            |t, v| t.matmul_t(v[0], v[1], ta, tb),
        );
    }
    check_op(
        "batched matmul",
        14,
        |r| vec![rand_tensor(r, &[2, 3, 4]), rand_tensor(r, &[2, 3, 4])],
        |t, v| t.matmul_t(v[0], v[1], false, true),
    );
}

#[test]
fn elementwise_binary_with_broadcast() {
    let shapes: [(&[usize], &[usize]); 3] = [(&[3, 4], &[3, 4]), (&[2, 3, 4], &[4]), (&[2, 1, 4], &[2, 3, 1])];
    for (i, (sa, sb)) in shapes.into_iter().enumerate() {
        let seed = 20 + i as u64 * 4;
        check_op("add", seed, |r| vec![rand_tensor(r, sa), rand_tensor(r, sb)], |t, v| t.add(v[0], v[1]));
        check_op("sub", seed + 1, |r| vec![rand_tensor(r, sa), rand_tensor(r, sb)], |t, v| t.sub(v[0], v[1]));
        check_op("mul", seed + 2, |r| vec![rand_tensor(r, sa), rand_tensor(r, sb)], |t, v| t.mul(v[0], v[1]));
        check_op(
            "div",
            seed + 3,
            |r| {
                let b = rand_tensor(r, sb);
                let b = Tensor::new(b.shape().to_vec(), b.data().iter().map(|x| 1.0 + x.abs()).collect()).unwrap();
                vec![rand_tensor(r, sa), b]
            },
            |t, v| t.div(v[0], v[1]),
        );
    }
}

#[test]
fn unary_ops() {
    let g = |r: &mut ChaCha8Rng| vec![rand_tensor(r, &[3, 5])];
    check_op("scale", 40, g, |t, v| t.scale(v[0], -2.5));
    check_op("add_scalar", 41, g, |t, v| t.add_scalar(v[0], 0.75));
    check_op("gelu", 42, g, |t, v| t.gelu(v[0]));
    check_op("relu", 43, g, |t, v| t.relu(v[0]));
    check_op("exp", 44, g, |t, v| t.apply(Op::Exp, &[v[0]]));
    check_op(
        "sqrt",
        45,
        |r| {
            let x = rand_tensor(r, &[3, 5]);
            vec![Tensor::new(vec![3, 5], x.data().iter().map(|v| 0.2 + v * v).collect()).unwrap()]
        },
        |t, v| t.sqrt(v[0]),
    );
}

#[test]
fn normalizations() {
    for axis in 0..3 {
        check_op("softmax", 50 + axis as u64, |r| vec![rand_tensor(r, &[2, 3, 4])], |t, v| t.softmax(v[0], axis));
        check_op("l2_normalize", 53 + axis as u64, |r| vec![rand_tensor(r, &[2, 3, 4])], |t, v| {
            t.l2_normalize(v[0], axis)
        });
        check_op("l2_norm", 56 + axis as u64, |r| vec![rand_tensor(r, &[2, 3, 4])], |t, v| t.l2_norm(v[0], axis));
    }
    check_op(
        "layer_norm",
        59,
        |r| vec![rand_tensor(r, &[3, 6]), rand_tensor(r, &[6]), rand_tensor(r, &[6])],
        |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5),
    );
}

#[test]
fn reductions() {
    for axis in 0..3 {
        for keep in [false, true] {
            let seed = 60 + 2 * axis as u64 + keep as u64;
            check_op("mean", seed, |r| vec![rand_tensor(r, &[2, 3, 4])], |t, v| t.mean(v[0], axis, keep));
            check_op("sum", seed + 10, |r| vec![rand_tensor(r, &[2, 3, 4])], |t, v| t.sum(v[0], axis, keep));
        }
    }
    check_op("sum_all", 80, |r| vec![rand_tensor(r, &[2, 3])], |t, v| t.sum_all(v[0]));
    check_op("inner", 81, |r| vec![rand_tensor(r, &[3, 4]), rand_tensor(r, &[3, 4])], |t, v| t.inner(v[0], v[1]));
    check_op("inner (vector)", 82, |r| vec![rand_tensor(r, &[5]), rand_tensor(r, &[5])], |t, v| t.inner(v[0], v[1]));
}

#[test]
fn shape_ops() {
    check_op(
        "concat",
        90,
        |r| vec![rand_tensor(r, &[2, 1, 3]), rand_tensor(r, &[2, 4, 3])],
        |t, v| t.concat(&[v[0], v[1]], 1),
    );
    check_op("slice", 91, |r| vec![rand_tensor(r, &[3, 5])], |t, v| t.slice(v[0], 1, 1, 4));
    check_op("reshape", 92, |r| vec![rand_tensor(r, &[3, 4])], |t, v| t.reshape(v[0], &[2, 6]));
    check_op("permute", 93, |r| vec![rand_tensor(r, &[2, 3, 4])], |t, v| t.permute(v[0], &[2, 0, 1]));
}

#[test]
fn lookup_and_losses() {
    check_op("embedding_lookup", 100, |r| vec![rand_tensor(r, &[6, 3])], |t, v| t.embedding(v[0], &[4, 0, 4, 2]));
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let targets: Vec<Vec<usize>> = (0..TRIALS).map(|_| (0..3).map(|_| rng.random_range(0..4)).collect()).collect();
    let counter = std::cell::Cell::new(0usize);
    check_op(
        "cross_entropy",
        102,
        |r| {
            counter.set(counter.get() + 1);
            vec![rand_tensor(r, &[3, 4])]
        },
        |t, v| t.cross_entropy(v[0], &targets[(counter.get() - 1) % TRIALS]),
    );
    check_op(
        "relu hinge",
        103,
        |r| vec![rand_tensor(r, &[8])],
        |t, v| {
            let s = t.add_scalar(v[0], -0.2)?;
            t.relu(s)
        },
    );
}

#[test]
fn softmax_cross_entropy_scalar_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits = rand_tensor(&mut rng, &[1, 4]);
    let err = grad_check(|t, v| t.cross_entropy(v[0], &[2]), &[logits], 1e-5).unwrap();
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn forward_is_bitwise_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = rand_tensor(&mut rng, &[17, 64]);
    let b = rand_tensor(&mut rng, &[64, 48]);
    let run = || {
        let m = apply(&Op::MatMul { trans_a: false, trans_b: false }, &[&a, &b]).unwrap();
        let s = apply(&Op::Softmax { axis: 1 }, &[&m]).unwrap();
        apply(&Op::Sum { axis: 0, keep_dim: false }, &[&s]).unwrap()
    };
    let first = run();
    for _ in 0..5 {
        assert_eq!(run().data(), first.data());
    }
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(data in prop::collection::vec(-30.0f64..30.0, 12), axis in 0usize..2) {
        let x = Tensor::new(vec![3, 4], data).unwrap();
        let y = apply(&Op::Softmax { axis }, &[&x]).unwrap();
        let sums = apply(&Op::Sum { axis, keep_dim: false }, &[&y]).unwrap();
        for s in sums.data() {
            prop_assert!((s - 1.0).abs() <= 1e-12);
        }
        for v in y.data() {
            prop_assert!((0.0..=1.0).contains(v));
        }
    }
}
