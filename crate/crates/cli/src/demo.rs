//! `camscope demo`: synthetic shapes, a desk-scale U-Net and side-by-side
//! Seg-Grad CAM / Seg-HiRes-Grad CAM overlays for every foreground class of
//! every held-out image.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use camscope::cam::{layer_gradient, Map2d, Method, PixelSetSpec, ReluOrder, TargetKind};
use camscope::render::{
    heatmap_overlay, render_labels, write_ppm, NormalizeMode, RgbImage, DEFAULT_ALPHA,
};
use camscope::trainer::{self, synth_dataset, EpochLog, Metrics, Sample, TrainConfig};
use camscope::unet::{load_weights_as, save_weights};
use camscope::{LabelMap, UNetConfig, UNetModel};

use crate::config::RunConfig;
use crate::{CliError, CliResult, EXIT_IO};

pub const KEYS: [&str; 8] = [
    "out_dir",
    "seed",
    "epochs",
    "lr",
    "samples",
    "test_samples",
    "skip_train",
    "model",
];

pub const CLASSES: usize = 3;
pub const SIZE: usize = 64;
pub const TRAIN_SAMPLES: usize = 64;
pub const TEST_SAMPLES: usize = 16;
pub const DEFAULT_OUT_DIR: &str = "camscope-demo";
/// Radius of the disc used to dilate true masks before measuring how much
/// heatmap mass lands on the object.
pub const DILATION_RADIUS: usize = 4;
/// Mixed into the seed so the held-out set never repeats training images.
const TEST_SEED_SALT: u64 = 0x5eed_7e57;

#[derive(Clone, Debug, PartialEq)]
pub struct DemoOptions {
    pub out_dir: PathBuf,
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub samples: usize,
    pub test_samples: usize,
    /// Pretrained weights; skips training when set.
    pub model: Option<PathBuf>,
}

impl Default for DemoOptions {
    fn default() -> Self {
        DemoOptions {
            out_dir: PathBuf::from(DEFAULT_OUT_DIR),
            seed: 0,
            epochs: trainer::DESK_EPOCHS,
            lr: trainer::DEFAULT_LR,
            samples: TRAIN_SAMPLES,
            test_samples: TEST_SAMPLES,
            model: None,
        }
    }
}

impl DemoOptions {
    pub fn from_config(cfg: &RunConfig) -> CliResult<Self> {
        let d = DemoOptions::default();
        let skip = cfg.skip_train.unwrap_or(false);
        if skip && cfg.model.is_none() {
            return Err(CliError::usage("--skip-train needs --model"));
        }
        if !skip && cfg.model.is_some() {
            return Err(CliError::usage("--model is only read with --skip-train"));
        }
        let opts = DemoOptions {
            out_dir: cfg.out_dir.clone().unwrap_or(d.out_dir),
            seed: cfg.seed.unwrap_or(d.seed),
            epochs: cfg.epochs.unwrap_or(d.epochs),
            lr: cfg.lr.unwrap_or(d.lr),
            samples: cfg.samples.unwrap_or(d.samples),
            test_samples: cfg.test_samples.unwrap_or(d.test_samples),
            model: cfg.model.clone(),
        };
        if opts.samples == 0 || opts.test_samples == 0 {
            return Err(CliError::usage("samples and test_samples must be >= 1"));
        }
        Ok(opts)
    }
}

/// How often Seg-HiRes-Grad CAM puts more of its mass on the true object
/// than Seg-Grad CAM, for one class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassLocalization {
    pub class: usize,
    /// Per test image containing the class: (Seg-Grad, Seg-HiRes-Grad)
    /// mass fractions inside the dilated true mask.
    pub fractions: Vec<(f64, f64)>,
}

impl ClassLocalization {
    pub fn images(&self) -> usize {
        self.fractions.len()
    }

    pub fn hires_wins(&self) -> usize {
        self.fractions.iter().filter(|(g, h)| h > g).count()
    }

    pub fn win_rate(&self) -> f64 {
        self.hires_wins() as f64 / self.images().max(1) as f64
    }
}

#[derive(Clone, Debug)]
pub struct DemoReport {
    /// Empty when training was skipped.
    pub train_log: Vec<EpochLog>,
    pub train_seconds: f64,
    pub test: Metrics,
    pub localization: Vec<ClassLocalization>,
    pub files: Vec<PathBuf>,
}

/// Pixels within `radius` (Euclidean) of a pixel labelled `class`.
pub fn dilate(label: &LabelMap, class: usize, radius: usize) -> Vec<bool> {
    let (h, w) = (label.height(), label.width());
    let r = radius as i64;
    let mut out = vec![false; h * w];
    for i in 0..h {
        for j in 0..w {
            if label.get(i, j) != class {
                continue;
            }
            for di in -r..=r {
                for dj in -r..=r {
                    let (y, x) = (i as i64 + di, j as i64 + dj);
                    if di * di + dj * dj <= r * r && (0..h as i64).contains(&y) && (0..w as i64).contains(&x) {
                        out[y as usize * w + x as usize] = true;
                    }
                }
            }
        }
    }
    out
}

/// Share of the (non-negative) map's total inside `mask`; 0 for an all-zero map.
pub fn mass_fraction(map: &Map2d, mask: &[bool]) -> f64 {
    let total: f64 = map.data.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let inside: f64 = map
        .data
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(v, _)| v)
        .sum();
    inside / total
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError {
        code: EXIT_IO,
        message: format!("{}: {e}", path.display()),
    }
}

fn write_text(path: PathBuf, text: &str, files: &mut Vec<PathBuf>) -> CliResult<()> {
    std::fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    files.push(path);
    Ok(())
}

/// Seg-Grad and Seg-HiRes-Grad heatmaps of `class` over its predicted
/// pixels, sharing one backward pass.
fn explain_pair(model: &UNetModel, sample: &Sample, class: usize) -> CliResult<(Map2d, Map2d, LabelMap)> {
    let grad = layer_gradient(
        model,
        &sample.image,
        class,
        &PixelSetSpec::PredictedClass(class),
        None,
        TargetKind::Logits,
    )?;
    let order = ReluOrder::default();
    let seg = grad.heatmap(Method::SegGradCam, 1, order)?;
    let hires = grad.heatmap(Method::SegHiresGradCam, 1, order)?;
    Ok((seg.post_relu, hires.post_relu, grad.prediction))
}

pub fn run_demo(opts: &DemoOptions, out: &mut dyn Write) -> CliResult<DemoReport> {
    let train_cfg = TrainConfig {
        lr: opts.lr,
        epochs: opts.epochs,
        seed: opts.seed,
    };
    train_cfg.validate()?;
    if let Some(path) = &opts.model {
        if !path.is_file() {
            return Err(CliError {
                code: EXIT_IO,
                message: format!("{}: no such file", path.display()),
            });
        }
    }
    crate::ensure_dir(&opts.out_dir)?;
    let mut files = Vec::new();
    let model_config = UNetConfig::desk(1, CLASSES, opts.seed);

    let started = Instant::now();
    let (model, train_log) = match &opts.model {
        Some(path) => {
            let model = load_weights_as(path, &model_config).map_err(|e| CliError::input(path, e))?;
            report!(out, "loaded {}", path.display())?;
            (model, Vec::new())
        }
        None => {
            let train = synth_dataset(opts.samples, CLASSES, SIZE, SIZE, opts.seed)?;
            report!(
                out,
                "training on {} synthetic {SIZE}x{SIZE} images, {} epochs",
                train.len(),
                opts.epochs
            )?;
            let (model, log) = trainer::train_with(UNetModel::new(model_config)?, &train, &train_cfg, |e| {
                let _ = writeln!(out, "epoch {:>3}  loss {:.6}  f1 {:.4}  iou {:.4}", e.epoch, e.loss, e.f1, e.iou);
            })?;
            let path = opts.out_dir.join("model.csw");
            save_weights(&model, &path)?;
            files.push(path);
            write_text(opts.out_dir.join("metrics.csv"), &trainer::metrics_csv(&log), &mut files)?;
            (model, log)
        }
    };
    let train_seconds = started.elapsed().as_secs_f64();

    let test = synth_dataset(opts.test_samples, CLASSES, SIZE, SIZE, opts.seed ^ TEST_SEED_SALT)?;
    let metrics = trainer::evaluate(&model, &test)?;
    report!(out, "held-out f1 {:.4}  iou {:.4}", metrics.f1, metrics.iou)?;
    let mut text = String::from("class,f1,iou\n");
    for (c, score) in metrics.per_class.iter().enumerate() {
        if let Some(s) = score {
            writeln!(text, "{c},{:.6},{:.6}", s.f1, s.iou).expect("string write");
        }
    }
    writeln!(text, "macro,{:.6},{:.6}", metrics.f1, metrics.iou).expect("string write");
    write_text(opts.out_dir.join("test_metrics.csv"), &text, &mut files)?;

    let mut localization: Vec<ClassLocalization> = (1..CLASSES)
        .map(|class| ClassLocalization {
            class,
            fractions: Vec::new(),
        })
        .collect();
    for (i, sample) in test.iter().enumerate() {
        let base = RgbImage::from_tensor(&sample.image)?;
        for loc in &mut localization {
            let class = loc.class;
            let (seg, hires, prediction) = explain_pair(&model, sample, class)?;
            if sample.label.count(class) > 0 {
                let mask = dilate(&sample.label, class, DILATION_RADIUS);
                loc.fractions.push((mass_fraction(&seg, &mask), mass_fraction(&hires, &mask)));
            }
            let panel = RgbImage::hconcat(
                &[
                    base.clone(),
                    render_labels(&sample.label),
                    render_labels(&prediction),
                    heatmap_overlay(&base, &seg, NormalizeMode::MinMax, DEFAULT_ALPHA)?,
                    heatmap_overlay(&base, &hires, NormalizeMode::MinMax, DEFAULT_ALPHA)?,
                ],
                2,
            )?;
            let path = opts.out_dir.join(format!("test{i:02}_class{class}.ppm"));
            write_ppm(&panel, &path)?;
            files.push(path);
        }
    }

    let mut text = String::from("class,images,hires_wins,win_rate,mean_grad_fraction,mean_hires_fraction\n");
    for loc in &localization {
        let n = loc.images().max(1) as f64;
        let mean_g = loc.fractions.iter().map(|f| f.0).sum::<f64>() / n;
        let mean_h = loc.fractions.iter().map(|f| f.1).sum::<f64>() / n;
        writeln!(
            text,
            "{},{},{},{:.6},{mean_g:.6},{mean_h:.6}",
            loc.class,
            loc.images(),
            loc.hires_wins(),
            loc.win_rate()
        )
        .expect("string write");
        report!(
            out,
            "class {}: Seg-HiRes-Grad CAM more on target in {}/{} images (mean mass {:.3} vs {:.3})",
            loc.class,
            loc.hires_wins(),
            loc.images(),
            mean_h,
            mean_g
        )?;
    }
    write_text(opts.out_dir.join("localization.csv"), &text, &mut files)?;
    report!(out, "wrote {} files to {}", files.len(), opts.out_dir.display())?;
    Ok(DemoReport {
        train_log,
        train_seconds,
        test: metrics,
        localization,
        files,
    })
}

pub fn run(cfg: &RunConfig, out: &mut dyn Write) -> CliResult<DemoReport> {
    run_demo(&DemoOptions::from_config(cfg)?, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dilation_disc() {
        let mut label = LabelMap::filled(9, 9, 0);
        label.set(4, 4, 1);
        let mask = dilate(&label, 1, 2);
        let count = mask.iter().filter(|&&m| m).count();
        // lattice points with x^2 + y^2 <= 4
        assert_eq!(count, 13);
        assert!(mask[2 * 9 + 4] && !mask[2 * 9 + 3]);
    }

    #[test]
    fn mass_fraction_cases() {
        let map = Map2d {
            height: 1,
            width: 4,
            data: vec![1.0, 3.0, 0.0, 4.0],
        };
        assert_eq!(mass_fraction(&map, &[true, false, true, true]), 5.0 / 8.0);
        assert_eq!(mass_fraction(&Map2d::zeros(1, 4), &[true; 4]), 0.0);
    }
}
