//! Central-difference gradient checks for every tape op, plus the
//! forward-value identities the ops must satisfy.

use diffcore::{grad_check, lstm_cell, LossEval, NodeId, ParamStore, Result, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Builds a store from named random tensors and gradchecks `build`.
fn check_op<F>(names: &[(&str, Vec<usize>, f64, f64)], seed: u64, build: F) -> f64
where
    F: Fn(&mut Tape, &std::collections::HashMap<String, NodeId>) -> Result<NodeId>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new(seed);
    for (name, shape, lo, hi) in names {
        store
            .insert(name, rand_tensor(shape.clone(), &mut rng, *lo, *hi), true)
            .unwrap();
    }
    let f = |p: &ParamStore| -> Result<LossEval> {
        let mut tape = Tape::new();
        let bound = tape.bind_store(p)?;
        let out = build(&mut tape, &bound)?;
        let loss = tape.sum_all(out)?;
        let value = tape.value(loss).item()?;
        let grads = tape.backward(loss)?;
        Ok(LossEval { value, grads })
    };
    let report = grad_check(f, &store, EPS, 24, seed ^ 0x5eed).unwrap();
    assert_eq!(report.coords_skipped, 0, "unexpected skipped coordinates");
    assert!(
        report.max_rel_err < TOL,
        "max rel err {} >= {TOL}",
        report.max_rel_err
    );
    report.max_rel_err
}

#[test]
fn grad_elementwise_ops() {
    check_op(&[("a", vec![3, 4], -2.0, 2.0), ("b", vec![3, 4], -2.0, 2.0)], 1, |t, m| {
        let s = t.add(m["a"], m["b"])?;
        let p = t.mul(s, m["a"])?;
        let q = t.sub(p, m["b"])?;
        t.tanh(q)
    });
    check_op(&[("a", vec![2, 5], -1.5, 1.5)], 2, |t, m| {
        let s = t.scale(m["a"], 0.7)?;
        let s = t.add_scalar(s, 0.3)?;
        let s = t.neg(s)?;
        t.sigmoid(s)
    });
    check_op(&[("a", vec![6], -1.0, 1.0)], 3, |t, m| t.exp(m["a"]));
    check_op(&[("a", vec![6], 0.2, 3.0)], 4, |t, m| t.ln(m["a"]));
    check_op(&[("a", vec![7], -2.0, 2.0)], 5, |t, m| t.tanh(m["a"]));
}

#[test]
fn grad_leaky_relu_and_clamp_away_from_kinks() {
    // Inputs stay > eps away from the non-differentiable points.
    check_op(&[("a", vec![9], 0.1, 2.0)], 6, |t, m| t.leaky_relu(m["a"], 0.2));
    check_op(&[("a", vec![9], -2.0, -0.1)], 7, |t, m| t.leaky_relu(m["a"], 0.2));
    check_op(&[("a", vec![9], -0.8, 0.8)], 8, |t, m| t.clamp(m["a"], -0.9, 0.9));
}

#[test]
fn grad_linear_and_matmul() {
    check_op(
        &[
            ("x", vec![3, 4], -1.0, 1.0),
            ("w", vec![5, 4], -1.0, 1.0),
            ("b", vec![5], -1.0, 1.0),
        ],
        9,
        |t, m| {
            let y = t.linear(m["x"], m["w"], Some(m["b"]))?;
            t.tanh(y)
        },
    );
    check_op(
        &[("a", vec![3, 4], -1.0, 1.0), ("b", vec![4, 2], -1.0, 1.0)],
        10,
        |t, m| {
            let y = t.matmul(m["a"], m["b"])?;
            t.sigmoid(y)
        },
    );
    check_op(
        &[("a", vec![2, 3, 4], -1.0, 1.0), ("b", vec![2, 4, 3], -1.0, 1.0)],
        11,
        |t, m| {
            let y = t.matmul(m["a"], m["b"])?;
            t.tanh(y)
        },
    );
    check_op(&[("a", vec![2, 3, 4], -1.0, 1.0)], 12, |t, m| {
        let at = t.transpose_last2(m["a"])?;
        t.matmul(m["a"], at)
    });
}

#[test]
fn grad_conv2d() {
    check_op(
        &[
            ("x", vec![2, 2, 6, 6], -1.0, 1.0),
            ("w", vec![3, 2, 4, 4], -0.5, 0.5),
            ("b", vec![3], -0.5, 0.5),
        ],
        13,
        |t, m| {
            let y = t.conv2d(m["x"], m["w"], m["b"], 2, 1)?;
            t.tanh(y)
        },
    );
}

#[test]
fn grad_deconv2d() {
    check_op(
        &[
            ("x", vec![2, 3, 3, 3], -1.0, 1.0),
            ("w", vec![3, 2, 4, 4], -0.5, 0.5),
            ("b", vec![2], -0.5, 0.5),
        ],
        14,
        |t, m| {
            let y = t.deconv2d(m["x"], m["w"], m["b"], 2, 1)?;
            t.tanh(y)
        },
    );
}

#[test]
fn grad_batchnorm_train_and_infer() {
    check_op(
        &[
            ("x", vec![3, 2, 4, 4], -2.0, 2.0),
            ("g", vec![2], 0.5, 1.5),
            ("b", vec![2], -0.5, 0.5),
        ],
        15,
        |t, m| {
            let y = t.batchnorm2d_train(m["x"], m["g"], m["b"], 1e-5)?;
            t.tanh(y)
        },
    );
    let rmean = Tensor::new(vec![2], vec![0.1, -0.2]).unwrap();
    let rvar = Tensor::new(vec![2], vec![0.9, 1.4]).unwrap();
    check_op(
        &[
            ("x", vec![2, 2, 3, 3], -2.0, 2.0),
            ("g", vec![2], 0.5, 1.5),
            ("b", vec![2], -0.5, 0.5),
        ],
        16,
        move |t, m| {
            let y = t.batchnorm2d_infer(m["x"], m["g"], m["b"], &rmean, &rvar, 1e-5)?;
            t.tanh(y)
        },
    );
}

#[test]
fn grad_softmax_variants() {
    check_op(&[("a", vec![3, 5], -2.0, 2.0)], 17, |t, m| {
        let y = t.softmax(m["a"])?;
        let sq = t.mul(y, y)?;
        t.tanh(sq)
    });
    check_op(&[("a", vec![2, 4, 4], -2.0, 2.0)], 18, |t, m| {
        let y = t.softmax_causal(m["a"])?;
        let sq = t.mul(y, y)?;
        t.tanh(sq)
    });
}

#[test]
fn grad_structure_ops() {
    check_op(
        &[("a", vec![2, 3], -1.0, 1.0), ("b", vec![2, 2], -1.0, 1.0)],
        19,
        |t, m| {
            let c = t.concat(&[m["a"], m["b"]], 1)?;
            let s = t.slice(c, 1, 1, 3)?;
            t.tanh(s)
        },
    );
    check_op(&[("a", vec![2, 3, 4], -1.0, 1.0)], 20, |t, m| {
        let p = t.permute(m["a"], &[2, 0, 1])?;
        let r = t.reshape(p, vec![4, 6])?;
        t.sigmoid(r)
    });
    check_op(
        &[("a", vec![3, 4], -1.0, 1.0), ("b", vec![4], -1.0, 1.0)],
        21,
        |t, m| {
            let y = t.add_bcast(m["a"], m["b"])?;
            t.tanh(y)
        },
    );
    check_op(&[("a", vec![5], -1.0, 1.0)], 22, |t, m| {
        let sq = t.mul(m["a"], m["a"])?;
        let mean = t.mean_all(sq)?;
        t.exp(mean)
    });
}

#[test]
fn grad_lstm_cell() {
    check_op(
        &[
            ("x", vec![2, 3], -1.0, 1.0),
            ("h", vec![2, 4], -1.0, 1.0),
            ("c", vec![2, 4], -1.0, 1.0),
            ("w_ih", vec![16, 3], -0.5, 0.5),
            ("w_hh", vec![16, 4], -0.5, 0.5),
            ("b", vec![16], -0.5, 0.5),
        ],
        23,
        |t, m| {
            let (h1, c1) = lstm_cell(t, m["x"], m["h"], m["c"], m["w_ih"], m["w_hh"], m["b"])?;
            let (h2, _) = lstm_cell(t, m["x"], h1, c1, m["w_ih"], m["w_hh"], m["b"])?;
            Ok(h2)
        },
    );
}

// ── forward identities ─────────────────────────────────────────────────

#[test]
fn linear_identity_case() {
    let mut tape = Tape::new();
    let x = tape
        .constant(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap())
        .unwrap();
    let eye = Tensor::from_fn(vec![3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
    let w = tape.constant(eye).unwrap();
    let b = tape.constant(Tensor::zeros(vec![3])).unwrap();
    let y = tape.linear(x, w, Some(b)).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0]);
}

#[test]
fn softmax_symmetry_case() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(vec![1, 3])).unwrap();
    let y = tape.softmax(x).unwrap();
    for v in tape.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn leaky_relu_definition_case() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::scalar(-1.0)).unwrap();
    let y = tape.leaky_relu(x, 0.2).unwrap();
    assert!((tape.value(y).item().unwrap() + 0.2).abs() < 1e-15);
}

#[test]
fn backward_sum_of_squares() {
    let mut tape = Tape::new();
    let x = tape
        .param("x", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap())
        .unwrap();
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum_all(sq).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get("x").unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn backward_constant_has_zero_gradient() {
    let mut tape = Tape::new();
    let _x = tape.param("x", Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
    let c = tape.constant(Tensor::scalar(5.0)).unwrap();
    let loss = tape.sum_all(c).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert!(grads.get("x").is_none());
    let z = grads.get_or_zeros("x", &[3]);
    assert_eq!(z.data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.param("x", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
    let y = tape.mul(x, x).unwrap();
    assert!(tape.backward(y).is_err());
}

#[test]
fn shape_mismatch_names_dimension() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(vec![2, 3])).unwrap();
    let b = tape.constant(Tensor::zeros(vec![2, 4])).unwrap();
    let err = tape.add(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("[2, 4]"), "{err}");
}

#[test]
fn non_finite_input_rejected() {
    let mut tape = Tape::new();
    assert!(tape.constant(Tensor::new(vec![1], vec![f64::NAN]).unwrap()).is_err());
    let x = tape.constant(Tensor::scalar(1000.0)).unwrap();
    // exp(1000) overflows; the op must reject the non-finite output.
    assert!(tape.exp(x).is_err());
}

#[test]
fn batchnorm_infer_is_affine() {
    // Doubling the deviation from the running mean doubles the
    // normalized pre-scale output (gamma = 1, beta = 0).
    let rmean = Tensor::new(vec![1], vec![0.5]).unwrap();
    let rvar = Tensor::new(vec![1], vec![2.0]).unwrap();
    let eval = |dev: f64| -> f64 {
        let mut tape = Tape::inference();
        let x = tape.constant(Tensor::full(vec![1, 1, 2, 2], 0.5 + dev)).unwrap();
        let g = tape.constant(Tensor::full(vec![1], 1.0)).unwrap();
        let b = tape.constant(Tensor::zeros(vec![1])).unwrap();
        let y = tape.batchnorm2d_infer(x, g, b, &rmean, &rvar, 1e-5).unwrap();
        tape.value(y).data()[0]
    };
    let y1 = eval(0.3);
    let y2 = eval(0.6);
    assert!((y2 - 2.0 * y1).abs() < 1e-12, "{y1} {y2}");
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut tape = Tape::new();
    let x = tape.constant(rand_tensor(vec![4, 7], &mut rng, -3.0, 3.0)).unwrap();
    let y = tape.softmax(x).unwrap();
    for row in tape.value(y).data().chunks_exact(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let z = tape.constant(rand_tensor(vec![2, 5, 5], &mut rng, -3.0, 3.0)).unwrap();
    let yc = tape.softmax_causal(z).unwrap();
    let data = tape.value(yc).data();
    for m in 0..2 {
        for i in 0..5 {
            let row = &data[(m * 5 + i) * 5..(m * 5 + i + 1) * 5];
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for &v in &row[i + 1..] {
                assert_eq!(v, 0.0);
            }
        }
    }
}

#[test]
fn causal_softmax_matches_prefix_softmax() {
    // Row i of the causal variant equals a plain softmax over the first
    // i+1 entries: the equivalence the attention fast path relies on.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let l = 6;
    let x = rand_tensor(vec![1, l, l], &mut rng, -2.0, 2.0);
    let mut tape = Tape::new();
    let xid = tape.constant(x.clone()).unwrap();
    let y = tape.softmax_causal(xid).unwrap();
    let full = tape.value(y).data().to_vec();
    for i in 0..l {
        let mut tape2 = Tape::new();
        let row = Tensor::new(vec![1, i + 1], x.data()[i * l..i * l + i + 1].to_vec()).unwrap();
        let rid = tape2.constant(row).unwrap();
        let s = tape2.softmax(rid).unwrap();
        for (j, v) in tape2.value(s).data().iter().enumerate() {
            assert!((full[i * l + j] - v).abs() < 1e-15);
        }
    }
}

#[test]
fn determinism_bitwise() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let mut tape = Tape::new();
        let x = tape.constant(rand_tensor(vec![2, 3, 8, 8], &mut rng, -1.0, 1.0)).unwrap();
        let w = tape.constant(rand_tensor(vec![4, 3, 4, 4], &mut rng, -0.5, 0.5)).unwrap();
        let b = tape.constant(rand_tensor(vec![4], &mut rng, -0.5, 0.5)).unwrap();
        let y = tape.conv2d(x, w, b, 2, 1).unwrap();
        let s = tape.sigmoid(y).unwrap();
        tape.value(s).data().to_vec()
    };
    let a = run();
    let b = run();
    assert_eq!(a, b);
}
