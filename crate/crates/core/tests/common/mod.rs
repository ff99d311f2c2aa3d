//! Shared helpers for integration tests: randomized small graphs and a
//! central finite-difference gradient oracle. The oracle only re-evaluates
//! forward passes, so it stays independent of the backward implementation
//! it checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vqa_interp::tape::{ReluMode, Tape, ValueId};
use vqa_interp::Tensor;

pub struct GraphCase {
    /// Rebuilds the graph for the given leaf values; returns leaf ids and
    /// the scalar output id.
    pub build: Box<dyn Fn(&mut Tape<f64>, &[Tensor<f64>]) -> (Vec<ValueId>, ValueId)>,
    pub inputs: Vec<Tensor<f64>>,
    pub relu_count: usize,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Sample one of several small topologies covering every primitive.
/// Parameter counts stay under 200.
pub fn random_graph(seed: u64) -> GraphCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match rng.gen_range(0..5u32) {
        0 => conv_chain(&mut rng),
        1 => embedding_chain(&mut rng),
        2 => elementwise_chain(&mut rng),
        3 => two_branch_product(&mut rng),
        _ => pool_matmul_chain(&mut rng),
    }
}

/// conv2d -> relu -> avgpool -> reshape -> matmul -> softmax -> CE.
fn conv_chain(rng: &mut ChaCha8Rng) -> GraphCase {
    let (ci, co) = (rng.gen_range(1..3usize), rng.gen_range(1..3usize));
    let side = 4;
    let img = rand_tensor(rng, vec![ci, side, side], 0.1, 1.0);
    let kern = rand_tensor(rng, vec![co, ci, 3, 3], -0.6, 0.6);
    let bias = rand_tensor(rng, vec![co], -0.4, 0.4);
    let classes = rng.gen_range(2..4usize);
    let w = rand_tensor(rng, vec![classes, co * 4], -0.5, 0.5);
    let label = rng.gen_range(0..classes);
    let relu_count = 1;
    GraphCase {
        build: Box::new(move |tape, inputs| {
            let img = tape.leaf(inputs[0].clone());
            let kern = tape.leaf(inputs[1].clone());
            let bias = tape.leaf(inputs[2].clone());
            let w = tape.leaf(inputs[3].clone());
            let conv = tape.conv2d(img, kern, Some(bias), 1).unwrap();
            let act = tape.relu(conv).unwrap();
            let pooled = tape.avg_pool2x2(act).unwrap();
            let flat_len = pooled_len(tape, pooled);
            let flat = tape.reshape(pooled, vec![flat_len]).unwrap();
            let logits = tape.matmul(w, flat).unwrap();
            let probs = tape.softmax(logits).unwrap();
            let loss = tape.cross_entropy(probs, label).unwrap();
            (vec![img, kern, bias, w], loss)
        }),
        inputs: vec![img, kern, bias, w],
        relu_count,
    }
}

fn pooled_len(tape: &Tape<f64>, id: ValueId) -> usize {
    tape.value(id).len()
}

/// embedding -> sum -> matmul -> tanh -> softmax -> pick.
fn embedding_chain(rng: &mut ChaCha8Rng) -> GraphCase {
    let vocab = rng.gen_range(3..6usize);
    let dim = rng.gen_range(2..5usize);
    let out = rng.gen_range(2..4usize);
    let table = rand_tensor(rng, vec![vocab, dim], -0.8, 0.8);
    let w = rand_tensor(rng, vec![out, dim], -0.7, 0.7);
    let b = rand_tensor(rng, vec![out], -0.3, 0.3);
    let len = rng.gen_range(1..5usize);
    let indices: Vec<usize> = (0..len).map(|_| rng.gen_range(0..vocab)).collect();
    let pick_at = rng.gen_range(0..out);
    GraphCase {
        build: Box::new(move |tape, inputs| {
            let table = tape.leaf(inputs[0].clone());
            let w = tape.leaf(inputs[1].clone());
            let b = tape.leaf(inputs[2].clone());
            let rows = tape.embedding_lookup(table, &indices).unwrap();
            let summed = tape.sum_over_axis(rows, 0).unwrap();
            let affine = tape.matmul(w, summed).unwrap();
            let shifted = tape.add(affine, b).unwrap();
            let act = tape.tanh(shifted).unwrap();
            let probs = tape.softmax(act).unwrap();
            let p = tape.pick(probs, pick_at).unwrap();
            (vec![table, w, b], p)
        }),
        inputs: vec![table, w, b],
        relu_count: 0,
    }
}

/// add/mul/tanh/relu chain ending in a sum to a scalar.
fn elementwise_chain(rng: &mut ChaCha8Rng) -> GraphCase {
    let n = rng.gen_range(3..9usize);
    let x = rand_tensor(rng, vec![n], -1.0, 1.0);
    let y = rand_tensor(rng, vec![n], -1.0, 1.0);
    let z = rand_tensor(rng, vec![n], 0.2, 1.2);
    GraphCase {
        build: Box::new(move |tape, inputs| {
            let x = tape.leaf(inputs[0].clone());
            let y = tape.leaf(inputs[1].clone());
            let z = tape.leaf(inputs[2].clone());
            let prod = tape.mul(x, y).unwrap();
            let shifted = tape.add(prod, z).unwrap();
            let gated = tape.relu(shifted).unwrap();
            let squashed = tape.tanh(gated).unwrap();
            let total = tape.sum_over_axis(squashed, 0).unwrap();
            (vec![x, y, z], total)
        }),
        inputs: vec![x, y, z],
        relu_count: 1,
    }
}

/// Two branches joined by an elementwise product, mirroring the fusion
/// structure: one branch passes a ReLU, the other stays smooth.
fn two_branch_product(rng: &mut ChaCha8Rng) -> GraphCase {
    let dim = rng.gen_range(2..5usize);
    let k = rng.gen_range(2..5usize);
    let a = rand_tensor(rng, vec![dim, k], -0.7, 0.7);
    let x = rand_tensor(rng, vec![k], -1.0, 1.0);
    let b = rand_tensor(rng, vec![dim, k], -0.7, 0.7);
    let y = rand_tensor(rng, vec![k], -1.0, 1.0);
    let readout = rand_tensor(rng, vec![1, dim], -0.9, 0.9);
    GraphCase {
        build: Box::new(move |tape, inputs| {
            let a = tape.leaf(inputs[0].clone());
            let x = tape.leaf(inputs[1].clone());
            let b = tape.leaf(inputs[2].clone());
            let y = tape.leaf(inputs[3].clone());
            let readout = tape.leaf(inputs[4].clone());
            let left = tape.matmul(a, x).unwrap();
            let left = tape.relu(left).unwrap();
            let right = tape.matmul(b, y).unwrap();
            let right = tape.tanh(right).unwrap();
            let fused = tape.mul(left, right).unwrap();
            let out = tape.matmul(readout, fused).unwrap();
            let scalar = tape.pick(out, 0).unwrap();
            (vec![a, x, b, y, readout], scalar)
        }),
        inputs: vec![a, x, b, y, readout],
        relu_count: 1,
    }
}

/// conv -> relu -> pool -> pick (keeps pooling and picking exercised).
fn pool_matmul_chain(rng: &mut ChaCha8Rng) -> GraphCase {
    let ci = rng.gen_range(1..3usize);
    let img = rand_tensor(rng, vec![ci, 4, 4], -1.0, 1.0);
    let kern = rand_tensor(rng, vec![2, ci, 3, 3], -0.5, 0.5);
    let pick_at = rng.gen_range(0..8usize);
    GraphCase {
        build: Box::new(move |tape, inputs| {
            let img = tape.leaf(inputs[0].clone());
            let kern = tape.leaf(inputs[1].clone());
            let conv = tape.conv2d(img, kern, None, 1).unwrap();
            let act = tape.relu(conv).unwrap();
            let pooled = tape.avg_pool2x2(act).unwrap();
            let act2 = tape.tanh(pooled).unwrap();
            let p = tape.pick(act2, pick_at).unwrap();
            (vec![img, kern], p)
        }),
        inputs: vec![img, kern],
        relu_count: 1,
    }
}

/// Smallest |pre-activation| across all ReLU nodes; finite differences are
/// only trusted when every kink is at least a few steps away.
pub fn relu_margin(case: &GraphCase) -> f64 {
    let mut tape = Tape::new(ReluMode::Classical);
    let (_, _) = (case.build)(&mut tape, &case.inputs);
    tape.relu_nodes()
        .iter()
        .flat_map(|(input, _)| tape.value(*input).data().iter().map(|v| v.abs()))
        .fold(f64::INFINITY, f64::min)
}

pub struct FdReport {
    pub coords_checked: usize,
    pub max_abs_err: f64,
}

/// Assert classical-mode gradients against central finite differences.
pub fn check_against_finite_differences(case: &GraphCase, step: f64) -> FdReport {
    let mut tape = Tape::new(ReluMode::Classical);
    let (leaves, out) = (case.build)(&mut tape, &case.inputs);
    let grads = tape.backward(out).unwrap();

    let eval = |inputs: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new(ReluMode::Classical);
        let (_, out) = (case.build)(&mut tape, inputs);
        tape.value(out).item()
    };

    let mut coords = 0usize;
    let mut max_err = 0.0f64;
    for (li, leaf) in leaves.iter().enumerate() {
        for c in 0..case.inputs[li].len() {
            let mut plus = case.inputs.to_vec();
            plus[li].data_mut()[c] += step;
            let mut minus = case.inputs.to_vec();
            minus[li].data_mut()[c] -= step;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * step);
            let ad = grads.wrt(*leaf).data()[c];
            let err = (ad - fd).abs();
            let tol = 1e-5_f64.max(1e-2 * ad.abs().max(fd.abs()));
            assert!(
                err <= tol,
                "leaf {li} coord {c}: autodiff {ad} vs finite-difference {fd} (err {err:.3e} > tol {tol:.3e})"
            );
            coords += 1;
            max_err = max_err.max(err);
        }
    }
    FdReport {
        coords_checked: coords,
        max_abs_err: max_err,
    }
}
