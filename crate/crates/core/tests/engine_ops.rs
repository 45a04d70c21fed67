mod common;

use acdg::engine::{conv_out_len, BnMode, RunningStats, Tape, Tensor, Var, STD_EPS};
use acdg::Error;
use common::{fd_check, random_tensor, rng, weighted_sum, FD_REL_TOL};

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

fn conv(x: &[f64], w: &[f64], stride: usize, padding: usize) -> Vec<f64> {
    let mut tape = Tape::new();
    let xv = tape.constant(t(&[1, 1, x.len()], x));
    let wv = tape.constant(t(&[1, 1, w.len()], w));
    let b = tape.constant(t(&[1], &[0.0]));
    let y = tape.conv1d(xv, wv, b, stride, padding).unwrap();
    tape.value(y).to_f64_vec()
}

/// Direct sliding-window sum, written independently of the im2col path.
fn conv_oracle(x: &[f64], w: &[f64], stride: usize, padding: usize) -> Vec<f64> {
    let padded: Vec<f64> = std::iter::repeat_n(0.0, padding)
        .chain(x.iter().copied())
        .chain(std::iter::repeat_n(0.0, padding))
        .collect();
    let mut out = Vec::new();
    let mut start = 0;
    while start + w.len() <= padded.len() {
        out.push(w.iter().enumerate().map(|(k, wk)| wk * padded[start + k]).sum());
        start += stride;
    }
    out
}

#[test]
fn conv1d_examples() {
    assert_eq!(conv(&[1., 2., 3., 4.], &[1., 0., -1.], 1, 0), vec![-2., -2.]);
    assert_eq!(conv(&[1., 1., 1., 1.], &[1., 1.], 2, 0), vec![2., 2.]);
    let x = [0.3, -1.7, 2.2, 0.9, 4.0];
    assert_eq!(conv(&x, &[1.0], 1, 0), x.to_vec());
    for (w, s, p) in [(vec![0.5, -1.0, 2.0], 1, 1), (vec![1.0, 3.0], 2, 0), (vec![2.0, 1.0, 0.0, -1.0], 3, 2)] {
        let got = conv(&x, &w, s, p);
        let want = conv_oracle(&x, &w, s, p);
        assert_eq!(got.len(), want.len());
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn conv1d_rejects_bad_geometry() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 4]));
    let w = tape.constant(Tensor::zeros(&[1, 3, 2]));
    let b = tape.constant(Tensor::zeros(&[1]));
    assert!(matches!(tape.conv1d(x, w, b, 1, 0), Err(Error::Dimension(_))));
    let w = tape.constant(Tensor::zeros(&[1, 2, 7]));
    assert!(matches!(tape.conv1d(x, w, b, 1, 0), Err(Error::Config(_))));
    assert_eq!(conv_out_len(4, 7, 1, 0), None);
}

#[test]
fn transpose_conv1d_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 1, 2], &[1., 2.]));
    let w = tape.constant(t(&[1, 1, 2], &[1., 1.]));
    let b = tape.constant(t(&[1], &[0.]));
    let y = tape.transpose_conv1d(x, w, b, 2, 0).unwrap();
    assert_eq!(tape.value(y).to_f64_vec(), vec![1., 1., 2., 2.]);

    let x = tape.constant(t(&[1, 1, 3], &[4., -1., 0.5]));
    let w = tape.constant(t(&[1, 1, 1], &[1.]));
    let y = tape.transpose_conv1d(x, w, b, 1, 0).unwrap();
    assert_eq!(tape.value(y).to_f64_vec(), vec![4., -1., 0.5]);
}

/// Builds the dense conv matrix column by column and checks that the
/// transposed convolution applies its transpose.
#[test]
fn transpose_conv1d_is_explicit_matrix_transpose() {
    let mut r = rng(11);
    for (len, k, stride, padding) in [(5, 3, 1, 1), (5, 2, 2, 0), (8, 5, 2, 2), (7, 3, 3, 1)] {
        let w = random_tensor(&mut r, &[1, 1, k]);
        let out_len = conv_out_len(len, k, stride, padding).unwrap();
        let mut m = vec![vec![0.0; len]; out_len];
        for j in 0..len {
            let mut e = vec![0.0; len];
            e[j] = 1.0;
            let col = conv_oracle(&e, w.data(), stride, padding);
            for i in 0..out_len {
                m[i][j] = col[i];
            }
        }
        let y = random_tensor(&mut r, &[1, 1, out_len]);
        let expect: Vec<f64> = (0..len)
            .map(|j| (0..out_len).map(|i| m[i][j] * y.data()[i]).sum())
            .collect();
        let op = len - ((out_len - 1) * stride + k - 2 * padding);
        let mut tape = Tape::new();
        let yv = tape.constant(y.clone());
        let wv = tape.constant(w.clone());
        let b = tape.constant(t(&[1], &[0.]));
        let got = tape.transpose_conv1d_padded(yv, wv, b, stride, padding, op).unwrap();
        let got = tape.value(got).to_f64_vec();
        for (a, e) in got.iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12, "len {len} k {k} s {stride} p {padding}");
        }
    }
}

/// tconv forward equals conv1d's input gradient, the latter measured by
/// central differences on random 5-element inputs.
#[test]
fn transpose_conv1d_matches_conv_input_gradient_by_fd() {
    let mut r = rng(3);
    for trial in 0..10 {
        let (k, stride, padding) = [(3, 1, 1), (2, 2, 0), (3, 2, 1), (1, 1, 0), (4, 1, 2)][trial % 5];
        let x = random_tensor(&mut r, &[1, 2, 5]);
        let w = random_tensor(&mut r, &[3, 2, k]);
        let out_len = conv_out_len(5, k, stride, padding).unwrap();
        let dy = random_tensor(&mut r, &[1, 3, out_len]);

        let h = 1e-6;
        let objective = |xs: &Tensor<f64>| -> f64 {
            let mut tape = Tape::new();
            let xv = tape.constant(xs.clone());
            let wv = tape.constant(w.clone());
            let b = tape.constant(Tensor::zeros(&[3]));
            let y = tape.conv1d(xv, wv, b, stride, padding).unwrap();
            tape.value(y).data().iter().zip(dy.data()).map(|(a, b)| a * b).sum()
        };
        let fd: Vec<f64> = (0..x.numel())
            .map(|j| {
                let mut p = x.clone();
                p.data_mut()[j] += h;
                let mut m = x.clone();
                m.data_mut()[j] -= h;
                (objective(&p) - objective(&m)) / (2.0 * h)
            })
            .collect();

        let op = 5 - ((out_len - 1) * stride + k - 2 * padding);
        let mut tape = Tape::new();
        let dyv = tape.constant(dy.clone());
        let wv = tape.constant(w.clone());
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = tape.transpose_conv1d_padded(dyv, wv, b, stride, padding, op).unwrap();
        for (a, e) in tape.value(y).data().iter().zip(&fd) {
            assert!((a - e).abs() < 1e-7, "trial {trial}: {a} vs {e}");
        }
    }
}

fn bn(x: Tensor<f64>, gamma: f64, beta: f64, mode: BnMode, stats: &mut RunningStats<f64>) -> Vec<f64> {
    let ch = x.shape()[1];
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let g = tape.constant(Tensor::full(&[ch], gamma));
    let b = tape.constant(Tensor::full(&[ch], beta));
    let y = tape.batch_norm1d(xv, g, b, stats, mode, STD_EPS).unwrap();
    tape.value(y).to_f64_vec()
}

#[test]
fn batch_norm_examples() {
    // Per channel: values {-1, 1} over batch*len -> zero mean, unit variance.
    let x = t(&[2, 1, 2], &[-1., 1., 1., -1.]);
    let y = bn(x.clone(), 1.0, 0.0, BnMode::Train, &mut RunningStats::new(1));
    for (a, b) in y.iter().zip(x.data()) {
        assert!((a - b).abs() < 1e-5);
    }
    let y = bn(Tensor::full(&[3, 2, 4], 7.0), 1.5, 0.25, BnMode::Train, &mut RunningStats::new(2));
    assert!(y.iter().all(|v| v.is_finite() && (v - 0.25).abs() < 1e-9));

    let mut stats = RunningStats::new(1);
    bn(t(&[1, 1, 4], &[1., 2., 3., 4.]), 1.0, 0.0, BnMode::Train, &mut stats);
    assert!((stats.mean[0] - 0.25).abs() < 1e-12);
    // unbiased variance 5/3, EMA with momentum 0.1 from 1.0
    assert!((stats.var[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);

    let before = stats.clone();
    bn(t(&[1, 1, 4], &[9., 2., 3., 4.]), 1.0, 0.0, BnMode::TrainFrozen, &mut stats);
    assert_eq!(before, stats);
    let y = bn(t(&[1, 1, 2], &[0.25, 1.25]), 1.0, 0.0, BnMode::Eval, &mut stats);
    let inv = 1.0 / (stats.var[0] + STD_EPS).sqrt();
    assert!((y[1] - inv).abs() < 1e-12);
}

#[test]
fn batch_norm_train_needs_two_values() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[1, 1, 1]));
    let g = tape.constant(Tensor::full(&[1], 1.0));
    let b = tape.constant(Tensor::zeros(&[1]));
    let mut s = RunningStats::new(1);
    assert!(matches!(
        tape.batch_norm1d(x, g, b, &mut s, BnMode::Train, STD_EPS),
        Err(Error::Config(_))
    ));
}

#[test]
fn channel_stats_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 2, 3], &[2., 2., 2., 1., 3., 2.]));
    let (mu, sigma) = tape.channel_stats(x, STD_EPS).unwrap();
    let (mu, sigma) = (tape.value(mu).to_f64_vec(), tape.value(sigma).to_f64_vec());
    assert_eq!(mu, vec![2.0, 2.0]);
    assert!((sigma[0] - STD_EPS).abs() < 1e-18);
    assert!((sigma[1] - (2.0f64 / 3.0).sqrt()).abs() < 1e-9);

    let x = tape.constant(t(&[1, 1, 2], &[1., 3.]));
    let (mu, sigma) = tape.channel_stats(x, STD_EPS).unwrap();
    assert_eq!(tape.value(mu).to_f64_vec(), vec![2.0]);
    assert!((tape.value(sigma).data()[0] - 1.0).abs() < 1e-9);
}

#[test]
fn standardization_yields_zero_mean_unit_std() {
    let mut r = rng(5);
    for _ in 0..20 {
        let mut tape = Tape::new();
        let x = tape.constant(random_tensor(&mut r, &[2, 3, 8]));
        let (mu, sigma) = tape.channel_stats(x, STD_EPS).unwrap();
        let z = tape.standardize(x, mu, sigma).unwrap();
        let (m2, s2) = tape.channel_stats(z, STD_EPS).unwrap();
        assert!(tape.value(m2).data().iter().all(|v| v.abs() < 1e-6));
        assert!(tape.value(s2).data().iter().all(|v| (v - 1.0).abs() < 1e-6));
    }
}

#[test]
fn linear_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 2], &[1., 2.]));
    let w = tape.constant(t(&[2, 2], &[1., 1., 1., -1.]));
    let b = tape.constant(t(&[2], &[0., 0.]));
    let y = tape.linear(x, w, b).unwrap();
    assert_eq!(tape.value(y).to_f64_vec(), vec![3., -1.]);
    let eye = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
    let y = tape.linear(x, eye, b).unwrap();
    assert_eq!(tape.value(y).to_f64_vec(), vec![1., 2.]);
    let bad = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(tape.linear(x, bad, b), Err(Error::Dimension(_))));
}

#[test]
fn cosine_and_cross_entropy_examples() {
    let mut tape = Tape::new();
    let u = tape.constant(t(&[3], &[0.3, -2.0, 5.0]));
    let c = tape.cosine_similarity(u, u, STD_EPS).unwrap();
    assert!((tape.value(c).data()[0] - 1.0).abs() < 1e-12);
    let e1 = tape.constant(t(&[2], &[1., 0.]));
    let e2 = tape.constant(t(&[2], &[0., 1.]));
    let c = tape.cosine_similarity(e1, e2, STD_EPS).unwrap();
    assert_eq!(tape.value(c).data()[0], 0.0);

    let logits = tape.constant(t(&[2, 3], &[800., 0., 0., 0., 0., 800.]));
    let ce = tape.softmax_cross_entropy(logits, &[0, 2]).unwrap();
    assert!(tape.value(ce).data()[0].abs() < 1e-12);
    let uniform = tape.constant(Tensor::zeros(&[4, 9]));
    let ce = tape.softmax_cross_entropy(uniform, &[0, 3, 8, 1]).unwrap();
    assert!((tape.value(ce).data()[0] - 9f64.ln()).abs() < 1e-12);
    let empty = tape.constant(Tensor::zeros(&[1, 3]));
    assert!(matches!(tape.softmax_cross_entropy(empty, &[]), Err(Error::Config(_))));
    assert!(matches!(tape.softmax_cross_entropy(empty, &[3]), Err(Error::Config(_))));
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]), true);
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().to_f64_vec(), vec![1.0; 6]);
    assert!(matches!(tape.backward(s), Err(Error::TapeConsumed)));

    let mut tape = Tape::new();
    let x = tape.leaf(t(&[2], &[1., 2.]), true);
    assert!(matches!(tape.backward(x), Err(Error::Usage(_))));

    let mut tape = Tape::<f64>::new();
    let fake = {
        let mut other = Tape::<f64>::new();
        other.constant(Tensor::scalar(1.0))
    };
    assert!(matches!(tape.backward(fake), Err(Error::Usage(_))));
}

#[test]
fn backward_of_mean_conv_matches_fd() {
    let mut r = rng(17);
    let x = random_tensor(&mut r, &[2, 3, 8]);
    let w = random_tensor(&mut r, &[2, 3, 3]);
    let b = random_tensor(&mut r, &[2]);
    let err = fd_check(&[x, w, b], |tape, v| {
        let y = tape.conv1d(v[0], v[1], v[2], 1, 1).unwrap();
        tape.mean(y)
    });
    assert!(err < FD_REL_TOL, "{err}");
}

#[test]
fn forward_backward_is_bitwise_deterministic() {
    let run = || {
        let mut r = rng(99);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(random_tensor(&mut r, &[2, 3, 8]), true);
        let w = tape.leaf(random_tensor(&mut r, &[4, 3, 3]), true);
        let b = tape.leaf(random_tensor(&mut r, &[4]), true);
        let y = tape.conv1d(x, w, b, 2, 1).unwrap();
        let y = tape.relu(y);
        let l = weighted_sum(&mut tape, y, 1);
        tape.backward(l).unwrap();
        let bits = |v: Var, tape: &Tape<f64>| -> Vec<u64> {
            tape.grad(v).unwrap().data().iter().map(|g| g.to_bits()).collect()
        };
        (bits(x, &tape), bits(w, &tape), bits(b, &tape))
    };
    assert_eq!(run(), run());
}
