//! Reverse-mode gradients of every tape operation against central finite
//! differences (float64, h = 1e-5, relative error <= 1e-3, 20 instances each).

use deltamem::numerics::{finite_diff_grad, relative_error, Tape, Tensor, Var};
use deltamem::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-3;
const INSTANCES: usize = 20;

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// Reduces the op output with fixed random weights so every output element
/// contributes to the checked scalar.
fn scalar_of(tape: &mut Tape<f64>, out: Var, weights: &[f64]) -> Var {
    let shape = tape.shape(out).to_vec();
    let w = tape.constant(shape, weights.to_vec()).unwrap();
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod).unwrap()
}

fn eval(build: &Build, inputs: &[Tensor<f64>], weights: &[f64]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = build(&mut tape, &vars).unwrap();
    let s = scalar_of(&mut tape, out, weights);
    tape.scalar(s)
}

fn check(name: &str, build: &Build, inputs: Vec<Tensor<f64>>, rng: &mut ChaCha8Rng) {
    let inputs: Vec<Tensor<f64>> = inputs.into_iter().map(|t| t.with_grad(true)).collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = build(&mut tape, &vars).unwrap();
    let n_out = tape.value(out).len();
    let weights: Vec<f64> = (0..n_out).map(|_| rng.random_range(-1.0..1.0)).collect();
    let s = scalar_of(&mut tape, out, &weights);
    let grads = tape.backward(s).unwrap();

    for (idx, v) in vars.iter().enumerate() {
        let numeric = finite_diff_grad(
            |probe| {
                let mut perturbed = inputs.clone();
                perturbed[idx] = probe.clone();
                eval(build, &perturbed, &weights)
            },
            &inputs[idx],
            H,
        )
        .unwrap();
        let zeros = vec![0.0; inputs[idx].numel()];
        let analytic = grads.get(*v).unwrap_or(&zeros);
        let err = relative_error(analytic, numeric.data());
        assert!(err <= TOL, "{name}: input {idx} relative error {err}");
    }
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::uniform(shape.to_vec(), 1.0, rng)
}

fn run(name: &str, seed: u64, make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>, build: &Build) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..INSTANCES {
        let inputs = make(&mut rng);
        check(name, build, inputs, &mut rng);
    }
}

#[test]
fn matmul_grad() {
    run(
        "matmul",
        1,
        |r| vec![rand_t(r, &[3, 4]), rand_t(r, &[4, 2])],
        &|t, v| t.matmul(v[0], v[1]),
    );
}

#[test]
fn linear_grad() {
    run(
        "linear",
        2,
        |r| vec![rand_t(r, &[3, 5]), rand_t(r, &[4, 5])],
        &|t, v| t.linear(v[0], v[1]),
    );
    run(
        "linear_vec",
        22,
        |r| vec![rand_t(r, &[5]), rand_t(r, &[4, 5])],
        &|t, v| t.linear(v[0], v[1]),
    );
}

#[test]
fn matvec_and_outer_grad() {
    run(
        "matvec",
        3,
        |r| vec![rand_t(r, &[3, 4]), rand_t(r, &[4])],
        &|t, v| t.matvec(v[0], v[1]),
    );
    run(
        "outer",
        4,
        |r| vec![rand_t(r, &[3]), rand_t(r, &[4])],
        &|t, v| t.outer(v[0], v[1]),
    );
}

#[test]
fn elementwise_grad() {
    let pair = |r: &mut ChaCha8Rng| vec![rand_t(r, &[2, 3]), rand_t(r, &[2, 3])];
    run("add", 5, pair, &|t, v| t.add(v[0], v[1]));
    run("sub", 6, pair, &|t, v| t.sub(v[0], v[1]));
    run("mul", 7, pair, &|t, v| t.mul(v[0], v[1]));
    let one = |r: &mut ChaCha8Rng| vec![Tensor::uniform(vec![2, 3], 2.0, r)];
    run("scale", 8, one, &|t, v| t.scale(v[0], -1.7));
    run("one_minus", 9, one, &|t, v| t.one_minus(v[0]));
    run("tanh", 10, one, &|t, v| t.tanh(v[0]));
    run("sigmoid", 11, one, &|t, v| t.sigmoid(v[0]));
    run("gelu", 12, one, &|t, v| t.gelu(v[0]));
    run("transpose", 13, one, &|t, v| t.transpose(v[0]));
    run("sum", 14, one, &|t, v| t.sum(v[0]));
}

#[test]
fn broadcast_and_diag_grad() {
    run(
        "add_row",
        15,
        |r| vec![rand_t(r, &[3, 4]), rand_t(r, &[4])],
        &|t, v| t.add_row(v[0], v[1]),
    );
    run(
        "diag_scale_rows",
        16,
        |r| vec![rand_t(r, &[3]), rand_t(r, &[3, 4])],
        &|t, v| t.diag_scale_rows(v[0], v[1]),
    );
}

#[test]
fn normalization_grad() {
    run(
        "l2norm_rows",
        17,
        |r| vec![rand_t(r, &[3, 5])],
        &|t, v| t.l2norm_rows(v[0], 1e-6),
    );
    run(
        "layer_norm",
        18,
        |r| vec![rand_t(r, &[3, 5]), rand_t(r, &[5]), rand_t(r, &[5])],
        &|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5),
    );
}

#[test]
fn softmax_and_cross_entropy_grad() {
    run(
        "softmax",
        19,
        |r| vec![Tensor::uniform(vec![3, 4], 3.0, r)],
        &|t, v| t.softmax_rows(v[0], false),
    );
    run(
        "softmax_causal",
        20,
        |r| vec![Tensor::uniform(vec![4, 4], 3.0, r)],
        &|t, v| t.softmax_rows(v[0], true),
    );
    run(
        "cross_entropy",
        21,
        |r| vec![Tensor::uniform(vec![4, 6], 3.0, r)],
        &|t, v| t.cross_entropy(v[0], &[Some(1), None, Some(5), Some(0)]),
    );
}

#[test]
fn indexing_grad() {
    run(
        "gather_rows",
        23,
        |r| vec![rand_t(r, &[5, 3])],
        &|t, v| t.gather_rows(v[0], &[4, 0, 4, 2]),
    );
    run(
        "slice_cols",
        24,
        |r| vec![rand_t(r, &[3, 6])],
        &|t, v| t.slice_cols(v[0], 2, 3),
    );
    run(
        "concat_cols",
        25,
        |r| vec![rand_t(r, &[3, 2]), rand_t(r, &[3, 4])],
        &|t, v| t.concat_cols(&[v[0], v[1]]),
    );
    run(
        "row",
        26,
        |r| vec![rand_t(r, &[3, 4])],
        &|t, v| t.row(v[0], 1),
    );
    run(
        "stack_rows",
        27,
        |r| vec![rand_t(r, &[4]), rand_t(r, &[4]), rand_t(r, &[4])],
        &|t, v| t.stack_rows(&[v[2], v[0], v[1]]),
    );
    run(
        "mean_rows",
        28,
        |r| vec![rand_t(r, &[5, 3])],
        &|t, v| t.mean_rows(v[0], &[1, 2, 4]),
    );
}

#[test]
fn delta_write_grad() {
    run(
        "delta_write",
        29,
        |r| {
            let beta = Tensor::from_fn(vec![4], |_| r.random_range(0.05..0.95));
            vec![rand_t(r, &[4, 4]), rand_t(r, &[4]), rand_t(r, &[4]), beta]
        },
        &|t, v| t.delta_write(v[0], v[1], v[2], v[3]),
    );
}

#[test]
fn fused_write_equals_composed_primitives() {
    // Diag(1 - beta) S + Diag(beta) (v - S k) k^T assembled from primitive ops.
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    for _ in 0..INSTANCES {
        let s = rand_t(&mut rng, &[4, 4]);
        let k = rand_t(&mut rng, &[4]);
        let v = rand_t(&mut rng, &[4]);
        let beta = Tensor::from_fn(vec![4], |_| rng.random_range(0.0..1.0));
        let mut tape = Tape::new();
        let (sv, kv, vv, bv) = (tape.leaf(&s), tape.leaf(&k), tape.leaf(&v), tape.leaf(&beta));
        let fused = tape.delta_write(sv, kv, vv, bv).unwrap();

        let keep = tape.one_minus(bv).unwrap();
        let retained = tape.diag_scale_rows(keep, sv).unwrap();
        let pred = tape.matvec(sv, kv).unwrap();
        let err = tape.sub(vv, pred).unwrap();
        let gated = tape.mul(bv, err).unwrap();
        let write = tape.outer(gated, kv).unwrap();
        let composed = tape.add(retained, write).unwrap();

        for (a, b) in tape.value(fused).iter().zip(tape.value(composed)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn chained_recurrence_grad() {
    // Three consecutive writes followed by a read: gradients flow through the
    // state recurrence into every key, value and gate.
    run(
        "recurrence",
        31,
        |r| {
            let mut v = vec![rand_t(r, &[3, 3]), rand_t(r, &[3])];
            for _ in 0..3 {
                v.push(rand_t(r, &[3]));
                v.push(rand_t(r, &[3]));
                v.push(rand_t(r, &[3]));
            }
            v
        },
        &|t, v| {
            let mut s = v[0];
            for step in 0..3 {
                let base = 2 + 3 * step;
                let k = t.l2norm_rows(v[base], 1e-6)?;
                let beta = t.sigmoid(v[base + 2])?;
                s = t.delta_write(s, k, v[base + 1], beta)?;
            }
            t.matvec(s, v[1])
        },
    );
}

#[test]
fn non_finite_results_are_errors() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(vec![2], vec![1e308, 1e308]).unwrap();
    assert!(tape.scale(x, 10.0).is_err());
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    for causal in [false, true] {
        let x = Tensor::<f64>::uniform(vec![5, 5], 10.0, &mut rng);
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let y = tape.softmax_rows(v, causal).unwrap();
        for row in tape.value(y).chunks(5) {
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }
}
