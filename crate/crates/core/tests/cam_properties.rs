use camscope::cam::{
    self, classification_cam, explain, layer_gradient, CamRequest, Map2d, Method, PixelSetSpec,
    ReluOrder, TargetKind,
};
use camscope::classifier::{GapClassifier, FEATURES};
use camscope::kernels;
use camscope::{Explainable, Tensor, UNetConfig, UNetModel};
use proptest::prelude::*;

const SIZE: usize = 16;

fn model(seed: u64) -> UNetModel {
    UNetModel::new(UNetConfig {
        depth: 3,
        channels: vec![8, 6, 4],
        in_channels: 1,
        num_classes: 3,
        seed,
    })
    .unwrap()
}

fn image(seed: u64) -> Tensor {
    Tensor::from_fn(&[1, 1, SIZE, SIZE], |i| {
        let v = (i as u64).wrapping_mul(2654435761).wrapping_add(seed * 97) % 1000;
        v as f64 / 1000.0
    })
}

fn pre_relu(m: &UNetModel, img: &Tensor, method: Method, class: usize, pts: Vec<(usize, usize)>, layer: &str) -> Map2d {
    let req = CamRequest::new(method, class, PixelSetSpec::Points(pts)).with_layer(layer);
    explain(m, img, &req).unwrap().pre_relu
}

fn assert_close(a: &Map2d, b: &Map2d, tol: f64) {
    assert_eq!((a.height, a.width), (b.height, b.width));
    for (k, (x, y)) in a.data.iter().zip(&b.data).enumerate() {
        assert!((x - y).abs() <= tol, "index {k}: {x} vs {y}");
    }
}

type Points = Vec<(usize, usize)>;

/// Disjoint point sets drawn from a shuffled pixel list.
fn disjoint_sets() -> impl Strategy<Value = (Points, Points)> {
    (Just((0..SIZE * SIZE).collect::<Vec<_>>()).prop_shuffle(), 1..20usize, 1..20usize).prop_map(
        |(perm, n1, n2)| {
            let to_pt = |k: &usize| (k / SIZE, k % SIZE);
            (
                perm[..n1].iter().map(to_pt).collect(),
                perm[n1..n1 + n2].iter().map(to_pt).collect(),
            )
        },
    )
}

fn layer_name() -> impl Strategy<Value = &'static str> {
    prop_oneof![Just("enc1.post"), Just("enc2.post"), Just("bottleneck"), Just("dec2.post"), Just("dec1.post")]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn pre_relu_is_additive_over_disjoint_sets(
        (m1, m2) in disjoint_sets(),
        class in 0..3usize,
        layer in layer_name(),
        seed in 0..4u64,
    ) {
        let m = model(seed);
        let img = image(seed);
        let union: Vec<_> = m1.iter().chain(&m2).copied().collect();
        for method in [Method::SegGradCam, Method::SegHiresGradCam] {
            let whole = pre_relu(&m, &img, method, class, union.clone(), layer);
            let parts = &pre_relu(&m, &img, method, class, m1.clone(), layer)
                + &pre_relu(&m, &img, method, class, m2.clone(), layer);
            assert_close(&whole, &parts, 1e-9);
        }
    }

    #[test]
    fn hires_decomposes_into_single_pixels((pts, _) in disjoint_sets(), class in 0..3usize) {
        let m = model(1);
        let img = image(1);
        let whole = pre_relu(&m, &img, Method::SegHiresGradCam, class, pts.clone(), "bottleneck");
        let mut sum = Map2d::zeros(SIZE, SIZE);
        for p in pts {
            sum = &sum + &pre_relu(&m, &img, Method::SegHiresGradCam, class, vec![p], "bottleneck");
        }
        assert_close(&whole, &sum, 1e-9);
    }

    #[test]
    fn xres_window_one_is_hires_bitwise(layer in layer_name(), class in 0..3usize, seed in 0..4u64) {
        let m = model(seed);
        let img = image(seed);
        let spec = PixelSetSpec::PredictedClass(class);
        let hires = explain(&m, &img, &CamRequest::new(Method::SegHiresGradCam, class, spec.clone()).with_layer(layer)).unwrap();
        let xres = explain(&m, &img, &CamRequest::new(Method::SegXresCam, class, spec).with_layer(layer).with_window(1)).unwrap();
        prop_assert_eq!(hires.pre_relu, xres.pre_relu);
        prop_assert_eq!(hires.post_relu, xres.post_relu);
    }

    #[test]
    fn post_relu_is_non_negative(
        method in prop_oneof![Just(Method::SegGradCam), Just(Method::SegHiresGradCam), Just(Method::SegXresCam)],
        layer in layer_name(),
        upsample_first in any::<bool>(),
        class in 0..3usize,
    ) {
        let order = if upsample_first { ReluOrder::UpsampleThenRelu } else { ReluOrder::ReluThenUpsample };
        let req = CamRequest::new(method, class, PixelSetSpec::WholeImage).with_layer(layer).with_relu_order(order);
        let hm = explain(&model(2), &image(2), &req).unwrap();
        prop_assert!(hm.post_relu.data.iter().all(|&v| v >= 0.0));
        prop_assert!(hm.pre_relu.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn scaling_class_logits_scales_maps(exp in -3i32..4, class in 0..3usize, layer in layer_name()) {
        // Powers of two keep every product exact.
        let lambda = 2f64.powi(exp);
        let base = model(3);
        let mut scaled = base.clone();
        let k = scaled.param("head.weight").unwrap().shape()[1];
        for name in ["head.weight", "head.bias"] {
            let per_class = if name == "head.bias" { 1 } else { k };
            let t = scaled.param_mut(name).unwrap();
            for v in &mut t.data_mut()[class * per_class..(class + 1) * per_class] {
                *v *= lambda;
            }
        }
        let img = image(3);
        for method in [Method::SegGradCam, Method::SegHiresGradCam] {
            let req = CamRequest::new(method, class, PixelSetSpec::WholeImage).with_layer(layer);
            let a = explain(&base, &img, &req).unwrap().pre_relu;
            let b = explain(&scaled, &img, &req).unwrap().pre_relu;
            for (x, y) in a.data.iter().zip(&b.data) {
                prop_assert!((lambda * x - y).abs() <= 1e-12 * (1.0 + y.abs()), "{} vs {}", lambda * x, y);
            }
            prop_assert_eq!(a.argmax(), b.argmax());
        }
    }
}

/// Independent bilinear resize (align corners) written from the formula.
fn bilinear_oracle(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let coord = |o: usize, n_out: usize, n_in: usize| {
        if n_out == 1 { 0.0 } else { o as f64 * (n_in - 1) as f64 / (n_out - 1) as f64 }
    };
    let mut out = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        for j in 0..ow {
            let (y, x) = (coord(i, oh, h), coord(j, ow, w));
            let (y0, x0) = (y.floor() as usize, x.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (dy, dx) = (y - y0 as f64, x - x0 as f64);
            let at = |r: usize, c: usize| src[r * w + c];
            out.push(
                at(y0, x0) * (1.0 - dy) * (1.0 - dx)
                    + at(y0, x1) * (1.0 - dy) * dx
                    + at(y1, x0) * dy * (1.0 - dx)
                    + at(y1, x1) * dy * dx,
            );
        }
    }
    out
}

#[test]
fn seg_grad_matches_loop_oracle() {
    let m = model(4);
    let img = image(4);
    let spec = PixelSetSpec::Rect { x0: 2, y0: 3, x1: 9, y1: 6 };
    for layer in m.layer_names() {
        let g = layer_gradient(&m, &img, 1, &spec, Some(&layer), TargetKind::Logits).unwrap();
        let (_, k, h, w) = g.activations.dims4().unwrap();
        // alpha_k = mean of gradient, then sum_k alpha_k A^k, by plain loops.
        let mut sum = vec![0.0; h * w];
        let mut sum_hires = vec![0.0; h * w];
        for c in 0..k {
            let mut alpha = 0.0;
            for i in 0..h {
                for j in 0..w {
                    alpha += g.gradient.at4(0, c, i, j);
                }
            }
            alpha /= (h * w) as f64;
            for i in 0..h {
                for j in 0..w {
                    sum[i * w + j] += alpha * g.activations.at4(0, c, i, j);
                    sum_hires[i * w + j] += g.gradient.at4(0, c, i, j) * g.activations.at4(0, c, i, j);
                }
            }
        }
        let seg = g.heatmap(Method::SegGradCam, 1, ReluOrder::default()).unwrap();
        let hires = g.heatmap(Method::SegHiresGradCam, 1, ReluOrder::default()).unwrap();
        for (got, loops) in [(&seg, &sum), (&hires, &sum_hires)] {
            let expected = bilinear_oracle(loops, h, w, SIZE, SIZE);
            for (a, b) in got.pre_relu.data.iter().zip(&expected) {
                assert!((a - b).abs() < 1e-10, "{layer}: {a} vs {b}");
            }
            let relu: Vec<f64> = loops.iter().map(|v| v.max(0.0)).collect();
            let expected = bilinear_oracle(&relu, h, w, SIZE, SIZE);
            for (a, b) in got.post_relu.data.iter().zip(&expected) {
                assert!((a - b).abs() < 1e-10, "{layer}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn xres_matches_loop_pooling_oracle() {
    let m = model(5);
    let img = image(5);
    let g = layer_gradient(&m, &img, 2, &PixelSetSpec::WholeImage, Some("enc2.post"), TargetKind::Logits).unwrap();
    let (_, k, h, w) = g.gradient.dims4().unwrap();
    for window in [2, 3, 5] {
        let weights = cam::xres_weights(&g.gradient, window).unwrap();
        for c in 0..k {
            for i in 0..h {
                for j in 0..w {
                    let (bi, bj) = (i / window * window, j / window * window);
                    let mut max = f64::NEG_INFINITY;
                    for y in bi..(bi + window).min(h) {
                        for x in bj..(bj + window).min(w) {
                            max = max.max(g.gradient.at4(0, c, y, x));
                        }
                    }
                    assert_eq!(weights.at4(0, c, i, j), max);
                }
            }
        }
    }
}

#[test]
fn bilinear_kernel_matches_oracle() {
    let src: Vec<f64> = (0..12).map(|v| (v * v % 7) as f64 - 2.5).collect();
    for (oh, ow) in [(3, 4), (5, 9), (16, 16), (7, 4)] {
        let got = kernels::bilinear_forward(1, 3, 4, oh, ow, &src);
        let expected = bilinear_oracle(&src, 3, 4, oh, ow);
        for (a, b) in got.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn probabilities_target_differs_from_logits() {
    let m = model(6);
    let img = image(6);
    let req = CamRequest::new(Method::SegGradCam, 1, PixelSetSpec::WholeImage);
    let logits = explain(&m, &img, &req).unwrap();
    let probs = explain(&m, &img, &req.clone().with_target(TargetKind::Probabilities)).unwrap();
    assert_ne!(logits.pre_relu, probs.pre_relu);
}

fn toy_head() -> GapClassifier {
    GapClassifier::new(1, 5, 3, 11).unwrap()
}

fn toy_image() -> Tensor {
    Tensor::from_fn(&[1, 1, 10, 12], |i| ((i * 31) % 23) as f64 / 23.0)
}

#[test]
fn gap_head_gradients_are_spatially_constant() {
    let head = toy_head();
    let g = layer_gradient(&head, &toy_image(), 2, &PixelSetSpec::Points(vec![(0, 0)]), None, TargetKind::Logits).unwrap();
    let (_, k, h, w) = g.gradient.dims4().unwrap();
    let fc = head.class_weights(2).unwrap();
    for (c, wc) in fc.iter().enumerate().take(k) {
        for v in g.gradient.plane(0, c) {
            assert!((v - wc / (h * w) as f64).abs() < 1e-15);
        }
    }
    let seg = g.heatmap(Method::SegGradCam, 1, ReluOrder::default()).unwrap();
    let hires = g.heatmap(Method::SegHiresGradCam, 1, ReluOrder::default()).unwrap();
    assert_close(&seg.pre_relu, &hires.pre_relu, 1e-10);
}

#[test]
fn segmentation_methods_reduce_to_classification() {
    let head = toy_head();
    let img = toy_image();
    let features = head.forward(&img).unwrap().capture(FEATURES).unwrap().tensor.clone();
    let (_, k, h, w) = features.dims4().unwrap();
    let n = (h * w) as f64;
    for class in 0..3 {
        let fc = head.class_weights(class).unwrap();
        // Grad CAM on GAP+FC by hand: alpha_k = w_ck / N.
        let mut direct = vec![0.0; h * w];
        for (c, wc) in fc.iter().enumerate().take(k) {
            for (p, v) in features.plane(0, c).iter().enumerate() {
                direct[p] += wc / n * v;
            }
        }
        let req = |m| CamRequest::new(m, class, PixelSetSpec::Points(vec![(0, 0)]));
        let seg = explain(&head, &img, &req(Method::SegGradCam)).unwrap();
        let seg_hires = explain(&head, &img, &req(Method::SegHiresGradCam)).unwrap();
        let grad = classification_cam(&head, &img, class, Method::GradCam, None, ReluOrder::default()).unwrap();
        let hires = classification_cam(&head, &img, class, Method::HiresCam, None, ReluOrder::default()).unwrap();
        for (a, b) in seg.pre_relu.data.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-10);
        }
        assert_close(&seg.pre_relu, &grad.pre_relu, 1e-10);
        assert_close(&seg_hires.pre_relu, &hires.pre_relu, 1e-10);

        let cam = cam::cam_fc(&head, &img, class, ReluOrder::default()).unwrap();
        for (a, b) in cam.pre_relu.data.iter().zip(&grad.pre_relu.data) {
            assert!((a - n * b).abs() < 1e-10 * (1.0 + a.abs()));
        }
        assert_eq!(cam.pre_relu.argmax(), grad.pre_relu.argmax());
    }
}

#[test]
fn warning_only_for_collapsed_layers() {
    let m = model(0);
    let req = CamRequest::new(Method::SegHiresGradCam, 0, PixelSetSpec::WholeImage);
    // depth 3 on 8x8: bottleneck 2x2, enc2 4x4.
    let small = Tensor::full(&[1, 1, 8, 8], 0.5);
    assert!(explain(&m, &small, &req).unwrap().warning.is_some());
    assert!(explain(&m, &small, &req.clone().with_layer("enc2.post")).unwrap().warning.is_none());
    assert!(explain(&m, &image(0), &req).unwrap().warning.is_none());
}
