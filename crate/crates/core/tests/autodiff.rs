use std::time::Instant;

use camscope::gradcheck::{finite_difference_grad, max_relative_error, run_suite, TOLERANCE};
use camscope::{OpKind, Tape, Tensor};
use proptest::prelude::*;

/// Direct six-loop cross-correlation with zero padding.
fn conv_oracle(
    x: &Tensor,
    k: &Tensor,
    bias: &Tensor,
    padding: usize,
    stride: usize,
) -> (Vec<usize>, Vec<f64>) {
    let (b, cin, h, w) = x.dims4().unwrap();
    let (cout, _, kh, kw) = k.dims4().unwrap();
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    let mut out = Vec::with_capacity(b * cout * oh * ow);
    for n in 0..b {
        for co in 0..cout {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = bias.data()[co];
                    for ci in 0..cin {
                        for u in 0..kh {
                            for v in 0..kw {
                                let y = (i * stride + u) as isize - padding as isize;
                                let xx = (j * stride + v) as isize - padding as isize;
                                if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w {
                                    acc += k.at4(co, ci, u, v) * x.at4(n, ci, y as usize, xx as usize);
                                }
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    (vec![b, cout, oh, ow], out)
}

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-1.0..1.0f64, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

fn conv_case() -> impl Strategy<Value = (Tensor, Tensor, Tensor, usize, usize)> {
    (1..3usize, 1..4usize, 1..4usize, 3..8usize, 3..8usize, 1..4usize, 1..4usize, 0..2usize, 1..3usize)
        .prop_flat_map(|(b, cin, cout, h, w, kh, kw, pad, stride)| {
            (
                tensor(vec![b, cin, h, w]),
                tensor(vec![cout, cin, kh, kw]),
                tensor(vec![cout]),
                Just(pad),
                Just(stride),
            )
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_matches_loop_oracle((x, k, bias, pad, stride) in conv_case()) {
        let mut tape = Tape::new();
        let (xi, ki, bi) = (tape.leaf(x.clone()), tape.leaf(k.clone()), tape.leaf(bias.clone()));
        let y = tape.conv2d(xi, ki, bi, pad, stride).unwrap();
        let (shape, expected) = conv_oracle(&x, &k, &bias, pad, stride);
        let got = tape.value(y).unwrap();
        prop_assert_eq!(got.shape(), &shape[..]);
        for (a, e) in got.data().iter().zip(&expected) {
            prop_assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences((x, k, bias, pad, stride) in conv_case()) {
        let objective = |x: &Tensor, k: &Tensor| {
            let mut tape = Tape::new();
            let (xi, ki, bi) = (tape.leaf(x.clone()), tape.leaf(k.clone()), tape.leaf(bias.clone()));
            let y = tape.conv2d(xi, ki, bi, pad, stride).unwrap();
            // Square so the gradient depends on the output values.
            let sq = tape.mul(y, y).unwrap();
            let s = tape.sum(sq).unwrap();
            (tape, xi, ki, s)
        };
        let (tape, xi, ki, s) = objective(&x, &k);
        let grads = tape.backward(s, &[xi, ki]).unwrap();
        let value = |tape: &Tape, s| tape.value(s).unwrap().data()[0];
        let nx = finite_difference_grad(|xp| { let (t, _, _, s) = objective(xp, &k); value(&t, s) }, &x, 1e-5);
        let nk = finite_difference_grad(|kp| { let (t, _, _, s) = objective(&x, kp); value(&t, s) }, &k, 1e-5);
        prop_assert!(max_relative_error(grads[&xi].data(), nx.data()) < TOLERANCE);
        prop_assert!(max_relative_error(grads[&ki].data(), nk.data()) < TOLERANCE);
    }

    #[test]
    fn backward_is_linear_in_the_target(x in tensor(vec![1, 2, 4, 4]), scale in -4.0..4.0f64) {
        let mut tape = Tape::new();
        let xi = tape.leaf(x);
        let r = tape.relu(xi).unwrap();
        let p = tape.maxpool2d(r, 2).unwrap();
        let s = tape.sum(p).unwrap();
        let scaled = tape.scale(s, scale).unwrap();
        let g1 = tape.backward(s, &[xi]).unwrap();
        let g2 = tape.backward(scaled, &[xi]).unwrap();
        for (a, b) in g1[&xi].data().iter().zip(g2[&xi].data()) {
            prop_assert!((scale * a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn suite_passes_within_budget() {
    let started = Instant::now();
    let reports = run_suite(0, None).unwrap();
    let elapsed = started.elapsed();
    for r in &reports {
        assert!(r.passed(), "{}: {:e}", r.name, r.max_rel_error);
    }
    assert!(reports.iter().any(|r| r.name.starts_with("unet")));
    assert!(elapsed.as_secs() < 60, "{elapsed:?}");
}

#[test]
fn suite_is_deterministic() {
    assert_eq!(run_suite(7, None).unwrap(), run_suite(7, None).unwrap());
}

#[test]
fn every_broken_backward_is_caught() {
    for kind in OpKind::ALL.into_iter().filter(|k| *k != OpKind::Leaf) {
        let reports = run_suite(0, Some(kind)).unwrap();
        assert!(
            reports.iter().any(|r| !r.passed()),
            "fault in {} went unnoticed",
            kind.name()
        );
    }
}
