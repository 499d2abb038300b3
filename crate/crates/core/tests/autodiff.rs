//! Kernel-level verification of the reverse-mode engine: every op's
//! analytic gradient is checked against central finite differences on
//! small random f64 tensors, alongside the hand-computed forward cases.

use dfadapter_core::graph::{Graph, Mode, Var};
use dfadapter_core::init;
use dfadapter_core::tensor::Tensor;
use rand::Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn rand_tensor(rng: &mut rand_chacha::ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Check d(loss)/d(inputs) for a graph built by `build`, comparing the
/// backward sweep against central differences component by component.
fn check_grads(
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
) {
    let mut g = Graph::new(Mode::Train);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = build(&mut g, &vars);
    assert!(g.value(loss).is_scalar(), "loss must be scalar");
    g.backward(loss).unwrap();
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v))))
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new(Mode::Train);
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let loss = build(&mut g, &vars);
        g.value(loss).data()[0]
    };

    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
            let a = analytic[i].data()[j];
            let denom = a.abs().max(numeric.abs());
            if denom < 1e-7 {
                assert!(
                    (a - numeric).abs() < 1e-9,
                    "input {i} component {j}: analytic {a} vs numeric {numeric}"
                );
            } else {
                let rel = (a - numeric).abs() / denom;
                assert!(
                    rel < TOL,
                    "input {i} component {j}: analytic {a} vs numeric {numeric} (rel {rel:.3e})"
                );
            }
        }
    }
}

/// Dot the op output against a fixed random tensor so the scalar loss has
/// nontrivial gradients through every component.
fn dot_loss(g: &mut Graph<f64>, out: Var, probe: &Tensor<f64>) -> Var {
    let w = g.constant(probe.clone());
    let m = g.mul(out, w).unwrap();
    g.sum(m).unwrap()
}

#[test]
fn matmul_hand_case() {
    let mut g: Graph<f64> = Graph::new(Mode::Eval);
    let a = g.constant(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let b = g.constant(Tensor::new(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap());
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
}

#[test]
fn matmul_identity_and_zero() {
    let mut rng = init::rng(11);
    let a = rand_tensor(&mut rng, &[3, 3]);
    let mut g: Graph<f64> = Graph::new(Mode::Eval);
    let av = g.constant(a.clone());
    let eye = g.constant(Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
    let zero = g.constant(Tensor::zeros(&[3, 3]));
    let ai = g.matmul(av, eye).unwrap();
    assert_eq!(g.value(ai).data(), a.data());
    let az = g.matmul(av, zero).unwrap();
    assert!(g.value(az).data().iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g: Graph<f64> = Graph::new(Mode::Eval);
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4, 2]));
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
}

#[test]
fn matmul_gradients() {
    let mut rng = init::rng(1);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[4, 2]);
    let probe = rand_tensor(&mut rng, &[3, 2]);
    check_grads(&[a, b], |g, v| {
        let c = g.matmul(v[0], v[1]).unwrap();
        dot_loss(g, c, &probe)
    });
}

#[test]
fn linear_matches_matmul_plus_bias_and_grads() {
    let mut rng = init::rng(2);
    let x = rand_tensor(&mut rng, &[2, 3, 4]);
    let w = rand_tensor(&mut rng, &[5, 4]);
    let b = rand_tensor(&mut rng, &[5]);
    let probe = rand_tensor(&mut rng, &[2, 3, 5]);
    check_grads(&[x, w, b], |g, v| {
        let y = g.linear(v[0], v[1], v[2]).unwrap();
        dot_loss(g, y, &probe)
    });
}

#[test]
fn softmax_uniform_and_hand_case() {
    let mut g: Graph<f64> = Graph::new(Mode::Eval);
    let x = g.constant(Tensor::new(&[3], vec![0.0, 0.0, 0.0]).unwrap());
    let s = g.softmax(x, 0).unwrap();
    for &v in g.value(s).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let y = g.constant(Tensor::new(&[2], vec![0.0, 3f64.ln()]).unwrap());
    let sy = g.softmax(y, 0).unwrap();
    let d = g.value(sy).data();
    assert!((d[0] - 0.25).abs() < 1e-12 && (d[1] - 0.75).abs() < 1e-12);
}

#[test]
fn softmax_shift_invariance_and_row_sums() {
    let mut rng = init::rng(3);
    let x = rand_tensor(&mut rng, &[4, 5]);
    let mut shifted = x.clone();
    for v in shifted.data_mut() {
        *v += 17.25;
    }
    let mut g: Graph<f64> = Graph::new(Mode::Eval);
    let a = g.constant(x);
    let b = g.constant(shifted);
    let sa = g.softmax(a, 1).unwrap();
    let sb = g.softmax(b, 1).unwrap();
    for (u, v) in g.value(sa).data().iter().zip(g.value(sb).data()) {
        assert!((u - v).abs() < 1e-12);
    }
    for row in g.value(sa).data().chunks(5) {
        let s: f64 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn softmax_axis_out_of_range() {
    let mut g: Graph<f64> = Graph::new(Mode::Eval);
    let x = g.constant(Tensor::zeros(&[2, 2]));
    assert!(g.softmax(x, 2).is_err());
}

#[test]
fn softmax_gradients_both_axes() {
    let mut rng = init::rng(4);
    for axis in [0usize, 1, 2] {
        let x = rand_tensor(&mut rng, &[3, 4, 2]);
        let probe = rand_tensor(&mut rng, &[3, 4, 2]);
        check_grads(&[x], |g, v| {
            let s = g.softmax(v[0], axis).unwrap();
            dot_loss(g, s, &probe)
        });
    }
}

#[test]
fn layer_norm_constant_row_and_hand_case() {
    let mut g: Graph<f64> = Graph::new(Mode::Eval);
    let gamma = g.constant(Tensor::filled(&[4], 1.0));
    let beta = g.constant(Tensor::zeros(&[4]));
    let x = g.constant(Tensor::filled(&[1, 4], 5.0));
    let y = g.layer_norm(x, gamma, beta, 1e-6).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v.abs() < 1e-6));

    let g2 = g.constant(Tensor::filled(&[2], 1.0));
    let b2 = g.constant(Tensor::zeros(&[2]));
    let x2 = g.constant(Tensor::new(&[1, 2], vec![1.0, 3.0]).unwrap());
    let y2 = g.layer_norm(x2, g2, b2, 1e-12).unwrap();
    let d = g.value(y2).data();
    assert!((d[0] + 1.0).abs() < 1e-9 && (d[1] - 1.0).abs() < 1e-9, "{d:?}");
}

#[test]
fn layer_norm_unit_variance() {
    let mut rng = init::rng(5);
    let x = rand_tensor(&mut rng, &[6, 16]);
    let mut g: Graph<f64> = Graph::new(Mode::Eval);
    let gamma = g.constant(Tensor::filled(&[16], 1.0));
    let beta = g.constant(Tensor::zeros(&[16]));
    let xv = g.constant(x);
    let y = g.layer_norm(xv, gamma, beta, 1e-12).unwrap();
    for row in g.value(y).data().chunks(16) {
        let mean: f64 = row.iter().sum::<f64>() / 16.0;
        let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-9);
    }
}

#[test]
fn layer_norm_width_mismatch() {
    let mut g: Graph<f64> = Graph::new(Mode::Eval);
    let gamma = g.constant(Tensor::filled(&[3], 1.0));
    let beta = g.constant(Tensor::zeros(&[3]));
    let x = g.constant(Tensor::zeros(&[2, 4]));
    assert!(g.layer_norm(x, gamma, beta, 1e-6).is_err());
}

#[test]
fn layer_norm_gradients() {
    let mut rng = init::rng(6);
    let x = rand_tensor(&mut rng, &[2, 3, 5]);
    let gamma = rand_tensor(&mut rng, &[5]);
    let beta = rand_tensor(&mut rng, &[5]);
    let probe = rand_tensor(&mut rng, &[2, 3, 5]);
    check_grads(&[x, gamma, beta], |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-6).unwrap();
        dot_loss(g, y, &probe)
    });
}

#[test]
fn conv2d_one_by_one_identity() {
    let mut rng = init::rng(7);
    let x = rand_tensor(&mut rng, &[1, 1, 4, 4]);
    let mut g: Graph<f64> = Graph::new(Mode::Eval);
    let xv = g.constant(x.clone());
    let w = g.constant(Tensor::filled(&[1, 1, 1, 1], 1.0));
    let b = g.constant(Tensor::zeros(&[1]));
    let y = g.conv2d(xv, w, b, 1, 0).unwrap();
    assert_eq!(g.value(y).data(), x.data());
}

#[test]
fn conv2d_table_extent_and_hand_case() {
    let mut g: Graph<f64> = Graph::new(Mode::Eval);
    let x = g.constant(Tensor::zeros(&[1, 3, 224, 224]));
    let w = g.constant(Tensor::zeros(&[64, 3, 3, 3]));
    let b = g.constant(Tensor::zeros(&[64]));
    let y = g.conv2d(x, w, b, 2, 1).unwrap();
    assert_eq!(g.shape(y), &[1, 64, 112, 112]);

    // 1-D cross-correlation [1,2,3,4] * [1,0,-1], pad 1.
    let x = g.constant(Tensor::new(&[1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let w = g.constant(Tensor::new(&[1, 1, 3, 3], vec![
        0.0, 0.0, 0.0,
        1.0, 0.0, -1.0,
        0.0, 0.0, 0.0,
    ]).unwrap());
    let b = g.constant(Tensor::zeros(&[1]));
    let y = g.conv2d(x, w, b, 1, 1).unwrap();
    // Only the middle kernel row overlaps the single input row, so the
    // output is exactly the 1-D cross-correlation.
    assert_eq!(g.shape(y), &[1, 1, 1, 4]);
    assert_eq!(g.value(y).data(), &[-2.0, -2.0, -2.0, 3.0]);
}

#[test]
fn conv2d_kernel_exceeding_input_errors() {
    let mut g: Graph<f64> = Graph::new(Mode::Eval);
    let x = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
    let w = g.constant(Tensor::zeros(&[1, 1, 5, 5]));
    let b = g.constant(Tensor::zeros(&[1]));
    assert!(g.conv2d(x, w, b, 1, 0).is_err());
}

#[test]
fn conv2d_gradients() {
    let mut rng = init::rng(8);
    for (stride, padding) in [(1usize, 0usize), (1, 1), (2, 1)] {
        let x = rand_tensor(&mut rng, &[2, 3, 5, 4]);
        let w = rand_tensor(&mut rng, &[2, 3, 3, 3]);
        let b = rand_tensor(&mut rng, &[2]);
        let oh = (5 + 2 * padding - 3) / stride + 1;
        let ow = (4 + 2 * padding - 3) / stride + 1;
        let probe = rand_tensor(&mut rng, &[2, 2, oh, ow]);
        check_grads(&[x, w, b], |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], stride, padding).unwrap();
            dot_loss(g, y, &probe)
        });
    }
}

#[test]
fn relu_values_and_gradients() {
    let mut g: Graph<f64> = Graph::new(Mode::Eval);
    let x = g.constant(Tensor::new(&[2], vec![-1.0, 2.0]).unwrap());
    let y = g.relu(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 2.0]);

    // Inputs kept away from the kink.
    let mut rng = init::rng(9);
    let x = Tensor::from_fn(&[3, 4], |_| {
        let v: f64 = rng.gen_range(0.1..1.0);
        if rng.gen::<bool>() {
            v
        } else {
            -v
        }
    });
    let probe = rand_tensor(&mut rng, &[3, 4]);
    check_grads(&[x], |g, v| {
        let y = g.relu(v[0]).unwrap();
        dot_loss(g, y, &probe)
    });
}

#[test]
fn gelu_gradients() {
    let mut rng = init::rng(10);
    let x = rand_tensor(&mut rng, &[4, 3]);
    let probe = rand_tensor(&mut rng, &[4, 3]);
    check_grads(&[x], |g, v| {
        let y = g.gelu(v[0]).unwrap();
        dot_loss(g, y, &probe)
    });
}

#[test]
fn maxpool_extent_and_gradients() {
    let mut g: Graph<f64> = Graph::new(Mode::Eval);
    let x = g.constant(Tensor::zeros(&[1, 1, 112, 112]));
    let y = g.max_pool2d(x, 3, 2, 1).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 56, 56]);

    let x = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
    assert!(g.max_pool2d(x, 5, 2, 0).is_err());

    // Distinct values, so the argmax is stable under the probe step.
    let mut rng = init::rng(12);
    let x = Tensor::from_fn(&[2, 2, 4, 4], |i| i as f64 * 0.13 + rng.gen_range(-0.01..0.01));
    let probe = rand_tensor(&mut rng, &[2, 2, 2, 2]);
    check_grads(&[x], |g, v| {
        let y = g.max_pool2d(v[0], 2, 2, 0).unwrap();
        dot_loss(g, y, &probe)
    });
}

#[test]
fn batch_norm_inference_hand_case() {
    let mut g: Graph<f64> = Graph::new(Mode::Eval);
    let x = g.constant(Tensor::filled(&[1, 1, 1, 1], 3.0));
    let gamma = g.constant(Tensor::filled(&[1], 1.0));
    let beta = g.constant(Tensor::zeros(&[1]));
    let y = g.batch_norm2d(x, gamma, beta, &[1.0], &[4.0], 0.0).unwrap();
    assert!((g.value(y).data()[0] - 1.0).abs() < 1e-15);
}

#[test]
fn batch_norm_train_normalizes_and_gradients() {
    let mut rng = init::rng(13);
    let x = rand_tensor(&mut rng, &[3, 2, 2, 2]);
    let mut g: Graph<f64> = Graph::new(Mode::Train);
    let xv = g.constant(x.clone());
    let gamma = g.constant(Tensor::filled(&[2], 1.0));
    let beta = g.constant(Tensor::zeros(&[2]));
    let y = g.batch_norm2d(xv, gamma, beta, &[0.0; 2], &[1.0; 2], 1e-12).unwrap();
    // Per-channel output mean 0, variance 1.
    let d = g.value(y).data();
    for c in 0..2 {
        let vals: Vec<f64> = (0..3)
            .flat_map(|b| d[(b * 2 + c) * 4..(b * 2 + c + 1) * 4].to_vec())
            .collect();
        let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
        let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-9);
    }
    let (bm, bv) = g.bn_batch_stats(y).unwrap();
    assert_eq!(bm.len(), 2);
    assert_eq!(bv.len(), 2);

    let gamma = rand_tensor(&mut rng, &[2]);
    let beta = rand_tensor(&mut rng, &[2]);
    let probe = rand_tensor(&mut rng, &[3, 2, 2, 2]);
    check_grads(&[x, gamma, beta], |g, v| {
        let y = g.batch_norm2d(v[0], v[1], v[2], &[0.0; 2], &[1.0; 2], 1e-6).unwrap();
        dot_loss(g, y, &probe)
    });
}

#[test]
fn mean_pool_add_scale_sum_gradients() {
    let mut rng = init::rng(14);
    let x = rand_tensor(&mut rng, &[2, 3, 4]);
    let b = rand_tensor(&mut rng, &[3, 4]);
    let s = rand_tensor(&mut rng, &[1]);
    let probe = rand_tensor(&mut rng, &[2, 4]);
    check_grads(&[x, b, s], |g, v| {
        let xb = g.add_broadcast(v[0], v[1]).unwrap();
        let xs = g.scale_by_scalar(xb, v[2]).unwrap();
        let pooled = g.mean_pool_tokens(xs).unwrap();
        dot_loss(g, pooled, &probe)
    });
}

#[test]
fn attention_ops_gradients() {
    let mut rng = init::rng(15);
    let q = rand_tensor(&mut rng, &[2, 3, 4]);
    let k = rand_tensor(&mut rng, &[2, 5, 4]);
    let v = rand_tensor(&mut rng, &[2, 5, 4]);
    let probe = rand_tensor(&mut rng, &[2, 3, 4]);
    check_grads(&[q, k, v], |g, vars| {
        let s = g.attn_scores(vars[0], vars[1], 2).unwrap();
        let p = g.softmax(s, 3).unwrap();
        let ctx = g.attn_context(p, vars[2]).unwrap();
        dot_loss(g, ctx, &probe)
    });
}

#[test]
fn attention_rows_sum_to_one() {
    let mut rng = init::rng(16);
    let q = rand_tensor(&mut rng, &[1, 4, 6]);
    let k = rand_tensor(&mut rng, &[1, 7, 6]);
    let mut g: Graph<f64> = Graph::new(Mode::Eval);
    let qv = g.constant(q);
    let kv = g.constant(k);
    let s = g.attn_scores(qv, kv, 3).unwrap();
    assert_eq!(g.shape(s), &[1, 3, 4, 7]);
    let p = g.softmax(s, 3).unwrap();
    for row in g.value(p).data().chunks(7) {
        let sum: f64 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }
}

#[test]
fn map_and_concat_tokens_gradients() {
    let mut rng = init::rng(17);
    let x = rand_tensor(&mut rng, &[2, 3, 2, 2]);
    let extra = rand_tensor(&mut rng, &[2, 2, 3]);
    let probe = rand_tensor(&mut rng, &[2, 6, 3]);
    check_grads(&[x, extra], |g, v| {
        let toks = g.map_to_tokens(v[0]).unwrap();
        let cat = g.concat_tokens(&[toks, v[1]]).unwrap();
        dot_loss(g, cat, &probe)
    });
}

#[test]
fn cross_entropy_hand_cases() {
    let mut g: Graph<f64> = Graph::new(Mode::Eval);
    let logits = g.constant(Tensor::zeros(&[3, 2]));
    let l = g.cross_entropy(logits, &[0, 1, 0]).unwrap();
    assert!((g.value(l).data()[0] - 2f64.ln()).abs() < 1e-12);

    let logits = g.constant(Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap());
    let l = g.cross_entropy(logits, &[0]).unwrap();
    assert!((g.value(l).data()[0] - (1.0 + std::f64::consts::E).ln()).abs() < 1e-12);

    // A hugely confident correct logit drives the loss to zero.
    let logits = g.constant(Tensor::new(&[1, 2], vec![60.0, 0.0]).unwrap());
    let l = g.cross_entropy(logits, &[0]).unwrap();
    assert!(g.value(l).data()[0] < 1e-12);
}

#[test]
fn cross_entropy_label_out_of_range() {
    let mut g: Graph<f64> = Graph::new(Mode::Eval);
    let logits = g.constant(Tensor::zeros(&[2, 2]));
    assert!(g.cross_entropy(logits, &[0, 2]).is_err());
}

#[test]
fn cross_entropy_gradients() {
    let mut rng = init::rng(18);
    let logits = rand_tensor(&mut rng, &[4, 3]);
    check_grads(&[logits], |g, v| g.cross_entropy(v[0], &[0, 2, 1, 1]).unwrap());
}

#[test]
fn backward_sum_of_squares() {
    let mut rng = init::rng(19);
    let x = rand_tensor(&mut rng, &[2, 3]);
    let mut g: Graph<f64> = Graph::new(Mode::Train);
    let xv = g.leaf(x.clone(), true);
    let sq = g.mul(xv, xv).unwrap();
    let loss = g.sum(sq).unwrap();
    g.backward(loss).unwrap();
    let grad = g.grad(xv).unwrap();
    for (gv, xv) in grad.data().iter().zip(x.data()) {
        assert!((gv - 2.0 * xv).abs() < 1e-12);
    }
}

#[test]
fn frozen_leaf_gets_no_gradient() {
    let mut rng = init::rng(20);
    let x = rand_tensor(&mut rng, &[2, 2]);
    let w = rand_tensor(&mut rng, &[2, 2]);
    let mut g: Graph<f64> = Graph::new(Mode::Train);
    let xv = g.leaf(x, false);
    let wv = g.leaf(w, true);
    let y = g.matmul(xv, wv).unwrap();
    let sq = g.mul(y, y).unwrap();
    let loss = g.sum(sq).unwrap();
    g.backward(loss).unwrap();
    assert!(g.grad(xv).is_none(), "frozen leaf must not get a grad buffer");
    assert!(g.grad(wv).is_some());
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g: Graph<f64> = Graph::new(Mode::Train);
    let x = g.leaf(Tensor::zeros(&[2, 2]), true);
    assert!(g.backward(x).is_err());
}

#[test]
fn composite_graph_finite_difference() {
    // A small end-to-end slice: linear -> gelu -> layer_norm -> attention
    // -> pooled cross-entropy, all inputs checked at once.
    let mut rng = init::rng(21);
    let x = rand_tensor(&mut rng, &[2, 3, 4]);
    let w = rand_tensor(&mut rng, &[4, 4]);
    let b = rand_tensor(&mut rng, &[4]);
    let gamma = rand_tensor(&mut rng, &[4]);
    let beta = rand_tensor(&mut rng, &[4]);
    let cls_w = rand_tensor(&mut rng, &[4, 2]);
    check_grads(&[x, w, b, gamma, beta, cls_w], |g, v| {
        let h = g.linear(v[0], v[1], v[2]).unwrap();
        let h = g.gelu(h).unwrap();
        let h = g.layer_norm(h, v[3], v[4], 1e-6).unwrap();
        let s = g.attn_scores(h, h, 2).unwrap();
        let p = g.softmax(s, 3).unwrap();
        let ctx = g.attn_context(p, h).unwrap();
        let added = g.add(ctx, h).unwrap();
        let pooled = g.mean_pool_tokens(added).unwrap();
        let logits = g.matmul(pooled, v[5]).unwrap();
        g.cross_entropy(logits, &[0, 1]).unwrap()
    });
}

#[test]
fn forward_backward_bitwise_deterministic() {
    let run = || -> (Vec<f64>, Vec<f64>) {
        let mut rng = init::rng(33);
        let x = rand_tensor(&mut rng, &[2, 4, 6]);
        let w = rand_tensor(&mut rng, &[6, 6]);
        let b = rand_tensor(&mut rng, &[6]);
        let mut g: Graph<f64> = Graph::new(Mode::Train);
        let xv = g.constant(x);
        let wv = g.leaf(w, true);
        let bv = g.leaf(b, true);
        let h = g.linear(xv, wv, bv).unwrap();
        let s = g.attn_scores(h, h, 3).unwrap();
        let p = g.softmax(s, 3).unwrap();
        let c = g.attn_context(p, h).unwrap();
        let pooled = g.mean_pool_tokens(c).unwrap();
        let loss = g.cross_entropy(pooled, &[1, 2]).unwrap();
        g.backward(loss).unwrap();
        (
            g.value(loss).data().to_vec(),
            g.grad(wv).unwrap().data().to_vec(),
        )
    };
    let (l1, g1) = run();
    let (l2, g2) = run();
    assert_eq!(l1, l2);
    assert_eq!(g1, g2);
}
