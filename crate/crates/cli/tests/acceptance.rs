//! Acceptance criteria, one line each. Runs without the libtest harness so
//! the PASS/FAIL lines are always printed; exits non-zero if any fails.

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use camscope::cam::{
    self, classification_cam, explain, layer_gradient, CamRequest, Map2d, Method, PixelSetSpec,
    ReluOrder, TargetKind,
};
use camscope::classifier::GapClassifier;
use camscope::gradcheck::run_suite;
use camscope::render::{decode_pnm, encode_pgm, encode_ppm, normalize_heatmap, NormalizeMode, RgbImage};
use camscope::trainer::{eval_metrics, synth_dataset};
use camscope::unet::load_weights;
use camscope::{predict_classes, Explainable, LabelMap, Tensor, UNetConfig, UNetModel};
use camscope_cli::demo::{run_demo, DemoOptions, DemoReport};
use camscope_cli::{run, EXIT_OK};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn max_diff(a: &Map2d, b: &Map2d) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn pre_relu(model: &dyn Explainable, image: &Tensor, method: Method, class: usize, pts: &[(usize, usize)]) -> Map2d {
    let req = CamRequest::new(method, class, PixelSetSpec::Points(pts.to_vec()));
    explain_dyn(model, image, &req).pre_relu
}

fn explain_dyn(model: &dyn Explainable, image: &Tensor, req: &CamRequest) -> cam::Heatmap {
    explain(model, image, req).expect("cam request")
}

fn gradient_correctness() -> Outcome {
    let started = Instant::now();
    let reports = run_suite(0, None).map_err(|e| e.to_string())?;
    let secs = started.elapsed().as_secs_f64();
    let worst = reports.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).unwrap();
    let has_unet = reports.iter().any(|r| r.name.starts_with("unet_depth2_16x16"));
    check(
        reports.iter().all(|r| r.passed()) && has_unet && secs < 60.0,
        format!("{} checks, worst {} at {:.2e}, {secs:.1} s", reports.len(), worst.name, worst.max_rel_error),
    )
}

fn desk_model_and_image(seed: u64) -> (UNetModel, Tensor) {
    let model = UNetModel::new(UNetConfig::desk(1, 3, seed)).unwrap();
    let image = synth_dataset(1, 3, 64, 64, seed).unwrap().remove(0).image;
    (model, image)
}

fn additivity() -> Outcome {
    let (model, image) = desk_model_and_image(1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut pixels: Vec<(usize, usize)> = (0..64).flat_map(|i| (0..64).map(move |j| (i, j))).collect();
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        pixels.shuffle(&mut rng);
        let (n1, n2) = (rng.random_range(1..300), rng.random_range(1..300));
        let (m1, m2) = (&pixels[..n1], &pixels[n1..n1 + n2]);
        let class = rng.random_range(0..3);
        for method in [Method::SegGradCam, Method::SegHiresGradCam] {
            let whole = pre_relu(&model, &image, method, class, &pixels[..n1 + n2]);
            let parts = &pre_relu(&model, &image, method, class, m1) + &pre_relu(&model, &image, method, class, m2);
            worst = worst.max(max_diff(&whole, &parts));
        }
    }
    check(worst <= 1e-9, format!("20 pairs x 2 methods, max |diff| {worst:.2e}"))
}

fn decomposition() -> Outcome {
    let (model, image) = desk_model_and_image(3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pts: Vec<(usize, usize)> = (0..8).map(|_| (rng.random_range(0..64), rng.random_range(0..64))).collect();
    let mut unique = pts.clone();
    unique.sort_unstable();
    unique.dedup();
    let whole = pre_relu(&model, &image, Method::SegHiresGradCam, 1, &unique);
    let mut sum = Map2d::zeros(64, 64);
    for p in &unique {
        sum = &sum + &pre_relu(&model, &image, Method::SegHiresGradCam, 1, &[*p]);
    }
    let d = max_diff(&whole, &sum);
    check(unique.len() == 8 && d <= 1e-9, format!("|M| = {}, max |diff| {d:.2e}", unique.len()))
}

fn toy_head() -> (GapClassifier, Tensor) {
    let head = GapClassifier::new(1, 6, 3, 7).unwrap();
    let image = Tensor::from_fn(&[1, 1, 12, 12], |i| ((i * 37) % 29) as f64 / 29.0);
    (head, image)
}

fn classification_reduction() -> Outcome {
    let (head, image) = toy_head();
    let mut worst: f64 = 0.0;
    let mut ratio_err: f64 = 0.0;
    let mut argmax_ok = true;
    for class in 0..3 {
        let seg = pre_relu(&head, &image, Method::SegGradCam, class, &[(0, 0)]);
        let seg_hires = pre_relu(&head, &image, Method::SegHiresGradCam, class, &[(0, 0)]);
        let grad = classification_cam(&head, &image, class, Method::GradCam, None, ReluOrder::default()).unwrap();
        let hires = classification_cam(&head, &image, class, Method::HiresCam, None, ReluOrder::default()).unwrap();
        worst = worst.max(max_diff(&seg, &grad.pre_relu)).max(max_diff(&seg_hires, &hires.pre_relu));
        let cam = cam::cam_fc(&head, &image, class, ReluOrder::default()).unwrap();
        let n = 144.0;
        for (c, g) in cam.pre_relu.data.iter().zip(&grad.pre_relu.data) {
            ratio_err = ratio_err.max((c - n * g).abs() / (1.0 + c.abs()));
        }
        argmax_ok &= cam.pre_relu.argmax() == grad.pre_relu.argmax();
    }
    check(
        worst <= 1e-10 && ratio_err <= 1e-10 && argmax_ok,
        format!("seg vs classic max |diff| {worst:.2e}; CAM = N x Grad CAM within {ratio_err:.1e}; argmax equal: {argmax_ok}"),
    )
}

fn constant_gradient(trained: &UNetModel, test_image: &Tensor) -> Outcome {
    let (head, image) = toy_head();
    let mut worst: f64 = 0.0;
    for class in 0..3 {
        let g = layer_gradient(&head, &image, class, &PixelSetSpec::Points(vec![(0, 0)]), None, TargetKind::Logits).unwrap();
        let a = g.heatmap(Method::SegGradCam, 1, ReluOrder::default()).unwrap();
        let b = g.heatmap(Method::SegHiresGradCam, 1, ReluOrder::default()).unwrap();
        worst = worst.max(max_diff(&a.pre_relu, &b.pre_relu));
    }
    let spec = PixelSetSpec::PredictedClass(1);
    let seg = explain(trained, test_image, &CamRequest::new(Method::SegGradCam, 1, spec.clone())).unwrap();
    let hires = explain(trained, test_image, &CamRequest::new(Method::SegHiresGradCam, 1, spec)).unwrap();
    let diverge = max_diff(
        &normalize_heatmap(&seg.pre_relu, NormalizeMode::MinMax),
        &normalize_heatmap(&hires.pre_relu, NormalizeMode::MinMax),
    );
    check(
        worst <= 1e-10 && diverge > 1e-3,
        format!("GAP head max |diff| {worst:.2e}; trained U-Net normalized L-inf {diverge:.3}"),
    )
}

fn xres_reduction() -> Outcome {
    let (model, image) = desk_model_and_image(5);
    let mut same = true;
    for layer in model.layer_names() {
        for class in 0..3 {
            let spec = PixelSetSpec::Rect { x0: 10, y0: 5, x1: 40, y1: 30 };
            let hires = explain(&model, &image, &CamRequest::new(Method::SegHiresGradCam, class, spec.clone()).with_layer(&layer)).unwrap();
            let xres = explain(&model, &image, &CamRequest::new(Method::SegXresCam, class, spec).with_layer(&layer).with_window(1)).unwrap();
            same &= hires.pre_relu == xres.pre_relu && hires.post_relu == xres.post_relu;
        }
    }
    check(same, format!("{} layers x 3 classes bitwise equal: {same}", model.layer_names().len()))
}

fn resolution_collapse() -> Outcome {
    let model = UNetModel::new(UNetConfig::desk(1, 3, 0)).unwrap();
    let req = CamRequest::new(Method::SegGradCam, 1, PixelSetSpec::WholeImage);
    let mut lines = Vec::new();
    let mut ok = true;
    // depth 4: the bottleneck is input / 8.
    for (size, expect) in [(8, true), (16, true), (24, false), (64, false)] {
        let image = Tensor::full(&[1, 1, size, size], 0.5);
        let warned = explain(&model, &image, &req).unwrap().warning.is_some();
        ok &= warned == expect;
        lines.push(format!("{}x{}:{}", size / 8, size / 8, if warned { "warn" } else { "quiet" }));
    }
    check(ok, format!("bottleneck {}", lines.join(" ")))
}

fn determinism_and_io(report: &DemoReport, trained: &UNetModel) -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |path: &Path| path.to_str().unwrap().to_string();
    let mut problems = Vec::new();

    let mut artifacts = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(format!("{name}.csw"));
        let cam_dir = dir.path().join(format!("cam_{name}"));
        let mut sink = Vec::new();
        let args = ["camscope", "train", "--synthetic", "n=4,classes=3,size=32", "--epochs", "2", "--seed", "11", "--out", &p(&out)];
        if run(args, &mut sink) != EXIT_OK {
            return Err("train failed".into());
        }
        let sample = &synth_dataset(1, 3, 32, 32, 12).unwrap()[0];
        let bytes: Vec<u8> = sample.image.data().iter().map(|v| (v * 255.0).round() as u8).collect();
        let image = dir.path().join("x.pgm");
        std::fs::write(&image, encode_pgm(32, 32, &bytes).unwrap()).unwrap();
        let args = ["camscope", "cam", "--model", &p(&out), "--image", &p(&image), "--method", "all", "--pixel-set", "class:1", "--out-dir", &p(&cam_dir)];
        if run(args, &mut sink) != EXIT_OK {
            return Err("cam failed".into());
        }
        let mut files = vec![std::fs::read(&out).unwrap(), std::fs::read(out.with_extension("csv")).unwrap()];
        for f in ["prediction.ppm", "pixelset.ppm", "seg_grad_bottleneck.ppm", "seg_hires_grad_bottleneck.ppm", "seg_xres_bottleneck.ppm"] {
            files.push(std::fs::read(cam_dir.join(f)).unwrap());
        }
        artifacts.push(files);
    }
    if artifacts[0] != artifacts[1] {
        problems.push("reruns differ".to_string());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let (w, h) = (rng.random_range(1..40), rng.random_range(1..40));
        let data: Vec<u8> = (0..3 * w * h).map(|_| rng.random()).collect();
        let img = RgbImage::new(w, h, data.clone()).unwrap();
        let rgb_ok = decode_pnm(&encode_ppm(&img)).map(|d| d.into_rgb() == img).unwrap_or(false);
        let gray_ok = decode_pnm(&encode_pgm(w, h, &data[..w * h]).unwrap()).map(|d| d.data == data[..w * h]).unwrap_or(false);
        if !(rgb_ok && gray_ok) {
            problems.push(format!("round trip lost data at {w}x{h}"));
        }
    }

    let mut identity: f64 = 0.0;
    let test = synth_dataset(4, 3, 64, 64, 77).unwrap();
    for s in &test {
        let pred = predict_classes(trained.forward(&s.image).unwrap().logits()).unwrap();
        let m = eval_metrics(&pred, &s.label, 3).unwrap();
        for c in m.per_class.iter().flatten() {
            identity = identity.max((c.f1 - 2.0 * c.iou / (1.0 + c.iou)).abs());
        }
    }
    for _ in 0..50 {
        let labels = |rng: &mut ChaCha8Rng| LabelMap::new(8, 8, (0..64).map(|_| rng.random_range(0..4)).collect()).unwrap();
        let (a, b) = (labels(&mut rng), labels(&mut rng));
        for c in eval_metrics(&a, &b, 4).unwrap().per_class.iter().flatten() {
            identity = identity.max((c.f1 - 2.0 * c.iou / (1.0 + c.iou)).abs());
        }
    }
    if identity > 1e-12 {
        problems.push(format!("F1/IoU identity off by {identity:.1e}"));
    }
    let demo_files = report.files.len();
    check(
        problems.is_empty(),
        if problems.is_empty() {
            format!("train+cam reruns bitwise equal, 100 PNM round trips lossless, F1 identity within {identity:.1e}; demo wrote {demo_files} files")
        } else {
            problems.join("; ")
        },
    )
}

fn desk_end_to_end(report: &DemoReport, seconds: f64) -> Outcome {
    let wins: Vec<String> = report
        .localization
        .iter()
        .map(|l| format!("class {} {}/{}", l.class, l.hires_wins(), l.images()))
        .collect();
    let localized = report.localization.iter().all(|l| l.images() > 0 && l.win_rate() >= 0.7);
    check(
        report.test.iou > 0.90 && report.test.f1 > 0.92 && seconds < 300.0 && localized,
        format!(
            "held-out IoU {:.3} F1 {:.3}, {seconds:.0} s; HiRes mass wins: {}",
            report.test.iou,
            report.test.f1,
            wins.join(", ")
        ),
    )
}

fn main() -> ExitCode {
    let dir = tempfile::tempdir().expect("temp dir");
    let opts = DemoOptions {
        out_dir: dir.path().join("demo"),
        ..DemoOptions::default()
    };
    let started = Instant::now();
    let demo = run_demo(&opts, &mut std::io::sink());
    let demo_seconds = started.elapsed().as_secs_f64();

    let mut results: Vec<(u32, &str, Outcome)> = vec![
        (1, "gradient correctness", gradient_correctness()),
        (2, "additivity oracle", additivity()),
        (3, "per-pixel decomposition", decomposition()),
        (4, "classification reduction", classification_reduction()),
    ];
    match &demo {
        Ok(report) => {
            let trained = load_weights(opts.out_dir.join("model.csw")).expect("demo model");
            let test_image = synth_dataset(1, 3, 64, 64, 2024).unwrap().remove(0).image;
            results.push((5, "constant-gradient equivalence", constant_gradient(&trained, &test_image)));
            results.push((6, "seg-xres reduction", xres_reduction()));
            results.push((7, "desk-scale end-to-end", desk_end_to_end(report, demo_seconds)));
            results.push((8, "resolution-collapse diagnostic", resolution_collapse()));
            results.push((9, "determinism and I/O", determinism_and_io(report, &trained)));
        }
        Err(e) => {
            let msg = format!("demo failed: {e}");
            results.push((5, "constant-gradient equivalence", Err(msg.clone())));
            results.push((6, "seg-xres reduction", xres_reduction()));
            results.push((7, "desk-scale end-to-end", Err(msg.clone())));
            results.push((8, "resolution-collapse diagnostic", resolution_collapse()));
            results.push((9, "determinism and I/O", Err(msg)));
        }
    }

    let mut failed = 0;
    for (n, name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("criterion {n} ({name}): PASS  {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL  {detail}");
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
