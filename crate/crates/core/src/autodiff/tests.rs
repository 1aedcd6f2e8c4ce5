use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::{self, GradcheckOptions};

fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape, data).unwrap()
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    gradcheck::uniform(rng, shape, -1.0, 1.0)
}

#[test]
fn conv2d_of_ones_sums_each_window() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[1, 1, 4, 4], 1.0));
    let w = g.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
    let b = g.constant(Tensor::zeros(&[1]));
    let y = g.conv2d(x, w, b, 2, 0).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 2, 2]);
    assert_eq!(g.value(y).data(), &[4.0; 4]);
}

#[test]
fn conv2d_zero_kernel_broadcasts_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::new();
    let x = g.constant(rand_t(&mut rng, &[2, 2, 5, 5]));
    let w = g.constant(Tensor::zeros(&[3, 2, 3, 3]));
    let b = g.constant(t(&[3], vec![0.5, -1.0, 2.0]));
    let y = g.conv2d(x, w, b, 2, 1).unwrap();
    assert_eq!(g.shape(y), &[2, 3, 3, 3]);
    for (i, chunk) in g.value(y).data().chunks(9).enumerate() {
        let want = [0.5, -1.0, 2.0][i % 3];
        assert!(chunk.iter().all(|&v| v == want));
    }
}

#[test]
fn conv2d_rejects_channel_mismatch() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let w = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
    let b = g.constant(Tensor::zeros(&[1]));
    assert!(matches!(g.conv2d(x, w, b, 1, 1), Err(Error::Contract(_))));
    assert!(matches!(g.conv2d_transpose(x, w, b, 2, 1, 1), Err(Error::Contract(_))));
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (n, c, f, h, w, k, s, p, op) in [
        (1, 1, 1, 4, 4, 2, 2, 0, 0),
        (2, 3, 4, 8, 6, 3, 2, 1, 1),
        (1, 2, 2, 7, 5, 3, 2, 1, 0),
        (1, 2, 3, 5, 5, 3, 1, 1, 0),
    ] {
        let x = rand_t(&mut rng, &[n, c, h, w]);
        let kernel = rand_t(&mut rng, &[f, c, k, k]);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let kv = g.constant(kernel.clone());
        let zf = g.constant(Tensor::zeros(&[f]));
        let zc = g.constant(Tensor::zeros(&[c]));
        let cx = g.conv2d(xv, kv, zf, s, p).unwrap();
        let y = rand_t(&mut rng, g.shape(cx));
        let yv = g.constant(y.clone());
        let ty = g.conv2d_transpose(yv, kv, zc, s, p, op).unwrap();
        assert_eq!(g.shape(ty), x.shape());
        let lhs = g.value(cx).dot(&y);
        let rhs = x.dot(g.value(ty));
        assert!(
            (lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()),
            "{lhs} vs {rhs}"
        );
    }
}

#[test]
fn conv_transpose_zero_input_broadcasts_bias() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 4, 2]));
    let w = g.constant(Tensor::full(&[2, 3, 3, 3], 0.3));
    let b = g.constant(t(&[3], vec![1.0, 2.0, 3.0]));
    let y = g.conv2d_transpose(x, w, b, 2, 1, 1).unwrap();
    assert_eq!(g.shape(y), &[1, 3, 8, 4]);
    for (i, chunk) in g.value(y).data().chunks(32).enumerate() {
        assert!(chunk.iter().all(|&v| v == (i + 1) as f64));
    }
}

#[test]
fn batch_norm_standardises_each_channel() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // Two channels with mean 5, std 2 before normalisation.
    let raw: Vec<f64> = (0..4 * 2 * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut g = Graph::new();
    let x = g.constant(t(&[4, 2, 3, 3], raw));
    let x = g.scale(x, 2.0);
    let five = g.constant(Tensor::full(&[4, 2, 3, 3], 5.0));
    let x = g.add(x, five).unwrap();
    let gamma = g.constant(Tensor::full(&[2], 1.0));
    let beta = g.constant(Tensor::zeros(&[2]));
    let (y, _) = g.batch_norm_train(x, gamma, beta, 0.0).unwrap();
    let data = g.value(y).data();
    for ch in 0..2 {
        let vals: Vec<f64> = (0..4)
            .flat_map(|s| data[(s * 2 + ch) * 9..(s * 2 + ch + 1) * 9].to_vec())
            .collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
        assert!(m.abs() < 1e-6 && (v - 1.0).abs() < 1e-6, "{m} {v}");
    }
}

#[test]
fn batch_norm_zero_gamma_yields_beta() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut g = Graph::new();
    let x = g.constant(rand_t(&mut rng, &[3, 2, 2]));
    let gamma = g.constant(Tensor::zeros(&[2]));
    let beta = g.constant(t(&[2], vec![0.25, -0.5]));
    let (y, _) = g.batch_norm_train(x, gamma, beta, 1e-5).unwrap();
    for (i, &v) in g.value(y).data().iter().enumerate() {
        assert_eq!(v, [0.25, -0.5][(i / 2) % 2]);
    }
}

#[test]
fn batch_norm_train_needs_two_samples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
    let gamma = g.constant(Tensor::full(&[2], 1.0));
    let beta = g.constant(Tensor::zeros(&[2]));
    assert!(matches!(
        g.batch_norm_train(x, gamma, beta, 1e-5),
        Err(Error::DegenerateBatch(1))
    ));
}

#[test]
fn batch_norm_eval_is_batch_size_independent() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let big = rand_t(&mut rng, &[5, 3, 2, 2]);
    let run = |x: Tensor<f64>| {
        let mut g = Graph::new();
        let x = g.constant(x);
        let gamma = g.constant(t(&[3], vec![1.0, 0.5, 2.0]));
        let beta = g.constant(t(&[3], vec![0.0, 0.1, -0.1]));
        let y = g
            .batch_norm_eval(x, gamma, beta, &[0.1, 0.2, 0.3], &[1.0, 2.0, 0.5], 1e-5)
            .unwrap();
        g.value(y).clone()
    };
    let all = run(big.clone());
    let first = run(Tensor::new(&[1, 3, 2, 2], big.data()[..12].to_vec()).unwrap());
    assert_eq!(&all.data()[..12], first.data());
    assert_eq!(run(big.clone()), all);
}

#[test]
fn leaky_relu_and_sigmoid_values() {
    let mut g = Graph::new();
    let x = g.constant(t(&[3], vec![-1.0, 3.0, 0.0]));
    let y = g.leaky_relu(x, 0.2);
    assert_eq!(g.value(y).data(), &[-0.2, 3.0, 0.0]);
    let s = g.constant(t(&[2], vec![0.0, 40.0]));
    let s = g.sigmoid(s);
    assert_eq!(g.value(s).data()[0], 0.5);
    assert!((g.value(s).data()[1] - 1.0).abs() < 1e-12);
}

#[test]
fn leaky_relu_gradient_on_negative_side_is_slope() {
    let mut g = Graph::new();
    let x = g.param(t(&[1], vec![-1.0]));
    let y = g.leaky_relu(x, 0.2);
    let l = g.sum(y);
    let grads = g.backward(l).unwrap();
    assert!((grads.get(x).unwrap().data()[0] - 0.2).abs() < 1e-15);
    let fd = ((-1.0 + 1e-5) * 0.2 - (-1.0 - 1e-5) * 0.2) / 2e-5;
    assert!((fd - 0.2f64).abs() < 1e-9);
}

#[test]
fn sigmoid_gradient_is_s_times_one_minus_s() {
    let mut g = Graph::new();
    let x = g.param(t(&[3], vec![-2.0, 0.3, 1.7]));
    let y = g.sigmoid(x);
    let l = g.sum(y);
    let grads = g.backward(l).unwrap();
    for (&xv, &gv) in [-2.0f64, 0.3, 1.7].iter().zip(grads.get(x).unwrap().data()) {
        let s = 1.0 / (1.0 + (-xv).exp());
        assert!((gv - s * (1.0 - s)).abs() < 1e-15);
    }
}

#[test]
fn linear_identity_and_zero_weight() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let input = rand_t(&mut rng, &[3, 4]);
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let eye = g.constant(Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 }));
    let zb = g.constant(Tensor::zeros(&[4]));
    let y = g.linear(x, eye, zb).unwrap();
    assert_eq!(g.value(y), &input);
    let zw = g.constant(Tensor::zeros(&[4, 2]));
    let b = g.constant(t(&[2], vec![1.5, -2.0]));
    let y = g.linear(x, zw, b).unwrap();
    assert_eq!(g.value(y).data(), &[1.5, -2.0, 1.5, -2.0, 1.5, -2.0]);
    let bad = g.constant(Tensor::zeros(&[3, 2]));
    assert!(g.linear(x, bad, b).is_err());
}

fn lstm_params(g: &mut Graph<f64>, d: usize, h: usize, w: Tensor<f64>, b: Tensor<f64>) -> LstmCell {
    assert_eq!(w.shape(), &[d + h, 4 * h]);
    LstmCell {
        weight: g.constant(w),
        bias: g.constant(b),
        hidden: h,
    }
}

#[test]
fn lstm_zero_everything_stays_zero() {
    let mut g = Graph::new();
    let cell = lstm_params(&mut g, 3, 4, Tensor::zeros(&[7, 16]), Tensor::zeros(&[16]));
    let x = g.constant(Tensor::zeros(&[2, 3]));
    let h = g.constant(Tensor::zeros(&[2, 4]));
    let c = g.constant(Tensor::zeros(&[2, 4]));
    let s = g.lstm_step(x, LstmState { h, c }, &cell).unwrap();
    assert!(g.value(s.h).data().iter().all(|&v| v == 0.0));
    assert!(g.value(s.c).data().iter().all(|&v| v == 0.0));
}

#[test]
fn saturated_forget_gate_preserves_memory() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let hd = 4;
    // Gates: input -40, forget +40, others 0.
    let bias = Tensor::from_fn(&[4 * hd], |i| match i / hd {
        0 => -40.0,
        1 => 40.0,
        _ => 0.0,
    });
    let mut g = Graph::new();
    let cell = lstm_params(&mut g, 3, hd, Tensor::zeros(&[3 + hd, 4 * hd]), bias);
    let x = g.constant(rand_t(&mut rng, &[2, 3]));
    let h = g.constant(rand_t(&mut rng, &[2, hd]));
    let c0 = rand_t(&mut rng, &[2, hd]);
    let c = g.constant(c0.clone());
    let s = g.lstm_step(x, LstmState { h, c }, &cell).unwrap();
    for (a, b) in g.value(s.c).data().iter().zip(c0.data()) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn cross_entropy_reference_values() {
    let mut g = Graph::<f64>::new();
    let logits = g.constant(Tensor::zeros(&[3, 10]));
    let l = g.softmax_cross_entropy(logits, &[0, 4, 9]).unwrap();
    assert!((g.value(l).item() - 10f64.ln()).abs() < 1e-12);
    let peaked = g.constant(Tensor::from_fn(&[1, 10], |i| if i == 2 { 40.0 } else { 0.0 }));
    let l = g.softmax_cross_entropy(peaked, &[2]).unwrap();
    assert!(g.value(l).item() < 1e-15);
    assert!(g.softmax_cross_entropy(peaked, &[10]).is_err());
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot() {
    let logits = t(&[1, 3], vec![0.5, -1.0, 2.0]);
    let mut g = Graph::new();
    let x = g.param(logits.clone());
    let l = g.softmax_cross_entropy(x, &[1]).unwrap();
    let grads = g.backward(l).unwrap();
    let z: f64 = logits.data().iter().map(|v| v.exp()).sum();
    for (j, (&v, &gv)) in logits.data().iter().zip(grads.get(x).unwrap().data()).enumerate() {
        let want = v.exp() / z - if j == 1 { 1.0 } else { 0.0 };
        assert!((gv - want).abs() < 1e-14);
    }
}

#[test]
fn every_primitive_passes_finite_differences() {
    let opts = GradcheckOptions::default();
    for &(name, gen) in gradcheck::PRIMITIVES {
        let r = gradcheck::run_check(name, gen, &opts).unwrap();
        assert!(r.instances >= 20);
        assert!(r.passed, "{name}: max rel err {}", r.max_rel_err);
    }
}

#[test]
fn corrupted_gradient_is_detected() {
    let opts = GradcheckOptions {
        instances: 2,
        corrupt: Some("linear".into()),
        ..Default::default()
    };
    let r = gradcheck::run_check("linear", gradcheck::PRIMITIVES[7].1, &opts).unwrap();
    assert_eq!(r.name, "linear");
    assert!(!r.passed);
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x0 = rand_t(&mut rng, &[2, 3]);
    let w0 = rand_t(&mut rng, &[3, 2]);
    let b0 = rand_t(&mut rng, &[2]);
    let grads_of = |which: u8| {
        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let w = g.constant(w0.clone());
        let b = g.constant(b0.clone());
        let lin = g.linear(x, w, b).unwrap();
        let l1 = g.sigmoid(lin);
        let l1 = g.sum(l1);
        let l2 = g.square(x);
        let l2 = g.mean(l2);
        let loss = match which {
            1 => l1,
            2 => l2,
            _ => g.add(l1, l2).unwrap(),
        };
        g.backward(loss).unwrap().take(x).unwrap()
    };
    let (a, b, both) = (grads_of(1), grads_of(2), grads_of(3));
    for ((x, y), z) in a.data().iter().zip(b.data()).zip(both.data()) {
        assert!((x + y - z).abs() < 1e-14);
    }
}

#[test]
fn backward_rejects_non_scalar_and_skips_constants() {
    let mut g = Graph::new();
    let x = g.param(t(&[2], vec![1.0, 2.0]));
    let c = g.constant(t(&[2], vec![3.0, 4.0]));
    let y = g.mul(x, c).unwrap();
    assert!(g.backward(y).is_err());
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[3.0, 4.0]);
    assert!(grads.get(c).is_none());
}

#[test]
fn forward_ops_are_bit_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = gradcheck::uniform(&mut rng, &[3, 2, 8, 6], -1.0, 1.0).cast::<f32>();
    let w = gradcheck::uniform(&mut rng, &[4, 2, 3, 3], -1.0, 1.0).cast::<f32>();
    let run = || {
        let mut g = Graph::<f32>::new();
        let xv = g.param(x.clone());
        let wv = g.param(w.clone());
        let b = g.constant(Tensor::zeros(&[4]));
        let y = g.conv2d(xv, wv, b, 2, 1).unwrap();
        let gm = g.constant(Tensor::full(&[4], 1.0));
        let bt = g.constant(Tensor::zeros(&[4]));
        let (y, _) = g.batch_norm_train(y, gm, bt, 1e-5).unwrap();
        let y = g.leaky_relu(y, 0.2);
        let l = g.mean(y);
        let grads = g.backward(l).unwrap();
        (g.value(y).clone(), grads.get(wv).unwrap().clone())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(bits(&ga), bits(&gb));
}
