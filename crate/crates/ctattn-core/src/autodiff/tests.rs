#![allow(clippy::cloned_ref_to_slice_refs)]

use super::*;
use crate::fdcheck::{fd_gradient, rel_error};
use crate::rng;

const FD_H: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

/// Deterministic weight tensor so losses are sensitive to every output entry.
fn probe_weights(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|i| 0.17 + 0.31 * ((i % 7) as f64)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Runs `build` on a fresh tape, turns the result into a weighted-sum scalar
/// and compares reverse-mode gradients against central differences.
fn gradcheck(name: &str, inputs: &[Tensor], build: impl Fn(&Tape, &[Var]) -> Var) {
    let forward = |ins: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&tape, &vars);
        let w = tape.leaf(probe_weights(&tape.shape_of(out)));
        let prod = tape.mul(out, w).unwrap();
        let loss = tape.sum_all(prod).unwrap();
        tape.get(loss).item()
    };

    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&tape, &vars);
    let w = tape.leaf(probe_weights(&tape.shape_of(out)));
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum_all(prod).unwrap();
    let grads = tape.backward(loss).unwrap();

    for (k, v) in vars.iter().enumerate() {
        let ad = grads.of(*v, &inputs[k].shape);
        let fd = fd_gradient(&forward, inputs, k, FD_H);
        let err = rel_error(&ad, &fd);
        assert!(err < FD_TOL, "{name}: input {k} rel err {err}");
    }
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::stream(seed, "gradcheck");
    Tensor::randn(shape, 1.0, &mut r)
}

#[test]
fn grad_matmul() {
    gradcheck("matmul", &[randn(&[3, 4], 1), randn(&[4, 2], 2)], |t, v| {
        t.matmul(v[0], v[1]).unwrap()
    });
}

#[test]
fn grad_elementwise_binary() {
    let a = randn(&[3, 3], 3);
    let b = randn(&[3, 3], 4);
    gradcheck("add", &[a.clone(), b.clone()], |t, v| {
        t.add(v[0], v[1]).unwrap()
    });
    gradcheck("sub", &[a.clone(), b.clone()], |t, v| {
        t.sub(v[0], v[1]).unwrap()
    });
    gradcheck("mul", &[a, b], |t, v| t.mul(v[0], v[1]).unwrap());
}

#[test]
fn grad_broadcast_ops() {
    gradcheck("add_bias", &[randn(&[4, 3], 5), randn(&[3], 6)], |t, v| {
        t.add_bias(v[0], v[1]).unwrap()
    });
    gradcheck(
        "mul_col",
        &[randn(&[4, 3], 7), randn(&[4, 1], 8)],
        |t, v| t.mul_col(v[0], v[1]).unwrap(),
    );
}

#[test]
fn grad_scalar_ops() {
    let a = randn(&[2, 5], 9);
    gradcheck("scale", &[a.clone()], |t, v| t.scale(v[0], -2.3).unwrap());
    gradcheck("add_scalar", &[a], |t, v| t.add_scalar(v[0], 0.7).unwrap());
}

#[test]
fn grad_shape_ops() {
    gradcheck("transpose", &[randn(&[3, 4], 10)], |t, v| {
        t.transpose(v[0]).unwrap()
    });
    gradcheck("reshape", &[randn(&[3, 4], 11)], |t, v| {
        t.reshape(v[0], &[2, 6]).unwrap()
    });
    gradcheck(
        "concat_cols",
        &[randn(&[3, 2], 12), randn(&[3, 3], 13), randn(&[3, 1], 14)],
        |t, v| t.concat_cols(v).unwrap(),
    );
}

#[test]
fn grad_gather_scatter() {
    gradcheck("select_rows", &[randn(&[5, 3], 15)], |t, v| {
        t.select_rows(v[0], &[4, 0, 2, 2]).unwrap()
    });
    gradcheck("select_entries", &[randn(&[3, 4], 16)], |t, v| {
        t.select_entries(v[0], &[0, 5, 5, 11]).unwrap()
    });
    gradcheck("scatter_entries", &[randn(&[4, 1], 17)], |t, v| {
        t.scatter_entries(v[0], &[1, 3, 3, 6], &[2, 4]).unwrap()
    });
    gradcheck("segment_sum", &[randn(&[6, 2], 18)], |t, v| {
        t.segment_sum(v[0], &[0, 1, 1, 2, 0, 2], 3).unwrap()
    });
}

#[test]
fn grad_reductions() {
    let a = randn(&[4, 3], 19);
    gradcheck("sum_axis0", &[a.clone()], |t, v| t.sum_axis0(v[0]).unwrap());
    gradcheck("sum_axis1", &[a.clone()], |t, v| t.sum_axis1(v[0]).unwrap());
    gradcheck("sum_all", &[a.clone()], |t, v| t.sum_all(v[0]).unwrap());
    gradcheck("mean_all", &[a], |t, v| t.mean_all(v[0]).unwrap());
}

#[test]
fn grad_pointwise_nonlinearities() {
    let a = randn(&[3, 4], 20);
    gradcheck("exp", &[a.clone()], |t, v| t.exp(v[0]).unwrap());
    gradcheck("tanh", &[a.clone()], |t, v| t.tanh(v[0]).unwrap());
    gradcheck("sigmoid", &[a.clone()], |t, v| t.sigmoid(v[0]).unwrap());
    gradcheck("softplus", &[a.clone()], |t, v| {
        t.softplus(v[0], 1.0).unwrap()
    });
    gradcheck("softplus_beta", &[a], |t, v| t.softplus(v[0], 2.5).unwrap());
    let pos = randn(&[3, 3], 21).map(|x| x.abs() + 0.5);
    gradcheck("log", &[pos], |t, v| t.log(v[0]).unwrap());
}

#[test]
fn grad_softmax_and_layer_norm() {
    gradcheck("softmax_rows", &[randn(&[3, 5], 22)], |t, v| {
        t.softmax_rows(v[0]).unwrap()
    });
    gradcheck(
        "layer_norm",
        &[randn(&[4, 6], 23), randn(&[6], 24), randn(&[6], 25)],
        |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap(),
    );
}

#[test]
fn grad_softmax_cross_entropy_against_fd() {
    // Classic composite: -sum(log softmax(x) at target entries).
    let x = randn(&[4, 4], 26);
    let targets = [2usize, 0, 3, 1];
    let forward = |ins: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let v = tape.leaf(ins[0].clone());
        let sm = tape.softmax_rows(v).unwrap();
        let lg = tape.log(sm).unwrap();
        let pos: Vec<usize> = targets
            .iter()
            .enumerate()
            .map(|(r, &c)| r * 4 + c)
            .collect();
        let picked = tape.select_entries(lg, &pos).unwrap();
        let s = tape.sum_all(picked).unwrap();
        let loss = tape.scale(s, -1.0).unwrap();
        tape.get(loss).item()
    };
    let tape = Tape::new();
    let v = tape.leaf(x.clone());
    let sm = tape.softmax_rows(v).unwrap();
    let lg = tape.log(sm).unwrap();
    let pos: Vec<usize> = targets
        .iter()
        .enumerate()
        .map(|(r, &c)| r * 4 + c)
        .collect();
    let picked = tape.select_entries(lg, &pos).unwrap();
    let s = tape.sum_all(picked).unwrap();
    let loss = tape.scale(s, -1.0).unwrap();
    let grads = tape.backward(loss).unwrap();
    let ad = grads.of(v, &x.shape);
    let fd = fd_gradient(&forward, &[x], 0, FD_H);
    let err = rel_error(&ad, &fd);
    assert!(err < 1e-5, "cross-entropy rel err {err}");
}

#[test]
fn simple_square_derivative() {
    // d/dx (x*x) at x=3 is 6.
    let tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0));
    let y = tape.mul(x, x).unwrap();
    let grads = tape.backward(y).unwrap();
    assert_eq!(grads.of(x, &[1]).item(), 6.0);
}

#[test]
fn adjoint_linearity_over_subgraphs() {
    // backward(f + g) equals backward(f) plus backward(g).
    let x0 = randn(&[3, 3], 27);
    let run = |mode: u8| -> Tensor {
        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let f = tape.sum_all(tape.tanh(x).unwrap()).unwrap();
        let g = tape.sum_all(tape.mul(x, x).unwrap()).unwrap();
        let loss = match mode {
            0 => tape.add(f, g).unwrap(),
            1 => f,
            _ => g,
        };
        let grads = tape.backward(loss).unwrap();
        grads.of(x, &x0.shape)
    };
    let combined = run(0);
    let f_only = run(1);
    let g_only = run(2);
    for i in 0..combined.data.len() {
        let sum = f_only.data[i] + g_only.data[i];
        assert!((combined.data[i] - sum).abs() < 1e-12);
    }
}

#[test]
fn unused_leaf_has_zero_gradient() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(1.0));
    let y = tape.leaf(Tensor::scalar(2.0));
    let loss = tape.mul(x, x).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert!(grads.get(y).is_none());
    assert_eq!(grads.of(y, &[1]).item(), 0.0);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[2, 2]));
    assert!(tape.backward(x).is_err());
}

#[test]
fn shape_mismatch_error_names_op_and_shapes() {
    let tape = Tape::new();
    let a = tape.leaf(Tensor::zeros(&[2, 3]));
    let b = tape.leaf(Tensor::zeros(&[3, 2]));
    let err = tape.add(a, b).unwrap_err().to_string();
    assert!(err.contains("add") && err.contains("[2, 3]") && err.contains("[3, 2]"));
}

#[test]
fn softmax_of_uniform_row() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::row(&[0.0, 0.0, 0.0]));
    let y = tape.softmax_rows(x).unwrap();
    for &v in &tape.get(y).data {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn softplus_at_zero_is_log_two() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(0.0));
    let y = tape.softplus(x, 1.0).unwrap();
    assert!((tape.get(y).item() - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn layer_norm_reference_row() {
    // LN([1,2,3]) with unit gamma, zero beta: (-1.2247, 0, 1.2247).
    let tape = Tape::new();
    let x = tape.leaf(Tensor::row(&[1.0, 2.0, 3.0]));
    let g = tape.leaf(Tensor::vector(&[1.0, 1.0, 1.0]));
    let b = tape.leaf(Tensor::vector(&[0.0, 0.0, 0.0]));
    let y = tape.layer_norm(x, g, b, 1e-9).unwrap();
    let out = tape.get(y);
    let expect = 1.5_f64.sqrt(); // 1/sqrt(2/3)
    assert!((out.data[0] + expect).abs() < 1e-4);
    assert!(out.data[1].abs() < 1e-12);
    assert!((out.data[2] - expect).abs() < 1e-4);
}

#[test]
fn dropout_rate_zero_is_identity() {
    let tape = Tape::for_training(rng::stream(1, "dropout"));
    let x = tape.leaf(Tensor::row(&[1.0, 2.0, 3.0]));
    let y = tape.dropout(x, 0.0).unwrap();
    assert_eq!(x, y);
}

#[test]
fn dropout_inactive_outside_training() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::row(&[1.0, 2.0]));
    let y = tape.dropout(x, 0.5).unwrap();
    assert_eq!(x, y);
}

#[test]
fn dropout_preserves_expectation() {
    // Inverted dropout: mean over 10^4 unit draws stays within 3 sigma of 1.
    let rate = 0.3;
    let n = 10_000;
    let tape = Tape::for_training(rng::stream(42, "dropout"));
    let x = tape.leaf(Tensor::full(&[n], 1.0));
    let y = tape.dropout(x, rate).unwrap();
    let mean = tape.get(y).data.iter().sum::<f64>() / n as f64;
    let keep = 1.0 - rate;
    let var = 1.0 / keep - 1.0;
    let sigma3 = 3.0 * (var / n as f64).sqrt();
    assert!((mean - 1.0).abs() < sigma3, "mean {mean}, band {sigma3}");
}

#[test]
fn dropout_gradient_uses_same_mask() {
    let tape = Tape::for_training(rng::stream(7, "dropout"));
    let x = tape.leaf(Tensor::full(&[64], 1.0));
    let y = tape.dropout(x, 0.5).unwrap();
    let loss = tape.sum_all(y).unwrap();
    let grads = tape.backward(loss).unwrap();
    let out = tape.get(y);
    let gx = grads.of(x, &[64]);
    // d(sum)/dx is exactly the realized mask.
    for i in 0..64 {
        assert_eq!(gx.data[i], out.data[i]);
    }
}
