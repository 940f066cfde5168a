//! `camscope train`.

use std::io::Write;
use std::path::{Path, PathBuf};

use camscope::render::{read_pnm, Pnm};
use camscope::trainer::{self, synth_dataset_with, Sample, SyntheticSpec, TrainConfig};
use camscope::unet::save_weights;
use camscope::{LabelMap, UNetConfig, UNetModel};

use crate::config::RunConfig;
use crate::{CliError, CliResult, EXIT_IO};

pub const KEYS: [&str; 9] = [
    "synthetic",
    "data_dir",
    "classes",
    "channels",
    "epochs",
    "lr",
    "seed",
    "out",
    "metrics",
];

pub const DESK_CHANNELS: [usize; 4] = [64, 32, 16, 8];

/// Suffix that marks a label mask next to its image.
pub const LABEL_SUFFIX: &str = ".label.pgm";

/// Loads `NAME.pgm`/`NAME.ppm` + `NAME.label.pgm` pairs, sorted by name.
/// Label masks store class indices directly as sample values.
pub fn load_data_dir(dir: &Path) -> CliResult<(Vec<Sample>, usize)> {
    let read_dir = std::fs::read_dir(dir).map_err(|e| CliError {
        code: EXIT_IO,
        message: format!("{}: {e}", dir.display()),
    })?;
    let mut images: Vec<PathBuf> = read_dir
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            !name.ends_with(LABEL_SUFFIX) && (name.ends_with(".pgm") || name.ends_with(".ppm"))
        })
        .collect();
    images.sort();
    if images.is_empty() {
        return Err(CliError::usage(format!(
            "{}: no .pgm or .ppm images found",
            dir.display()
        )));
    }
    let mut samples = Vec::with_capacity(images.len());
    let mut channels = None;
    for path in images {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let label_path = path.with_file_name(format!("{stem}{LABEL_SUFFIX}"));
        let image = read_pnm(&path).map_err(|e| CliError::input(&path, e))?;
        let mask: Pnm = read_pnm(&label_path).map_err(|e| CliError::input(&label_path, e))?;
        if mask.channels != 1 {
            return Err(CliError::usage(format!(
                "{}: label masks must be PGM",
                label_path.display()
            )));
        }
        if *channels.get_or_insert(image.channels) != image.channels {
            return Err(CliError::usage(format!(
                "{}: mixes grayscale and colour images",
                dir.display()
            )));
        }
        let label = LabelMap::new(
            mask.height,
            mask.width,
            mask.data.iter().map(|&v| v as usize).collect(),
        )?;
        let sample = Sample::new(image.to_tensor(), label)
            .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        samples.push(sample);
    }
    Ok((samples, channels.unwrap_or(1)))
}

/// Training data, input channels and class count.
fn dataset(cfg: &RunConfig, seed: u64) -> CliResult<(Vec<Sample>, usize, usize)> {
    match (&cfg.synthetic, &cfg.data_dir) {
        (Some(_), Some(_)) => Err(CliError::usage("give either synthetic or data_dir, not both")),
        (None, Some(dir)) => {
            let (samples, in_channels) = load_data_dir(dir)?;
            let max_label = samples.iter().map(|s| s.label.max_label()).max().unwrap_or(0);
            let classes = cfg.classes.unwrap_or((max_label + 1).max(2));
            if max_label >= classes {
                return Err(CliError::usage(format!(
                    "label {max_label} found but only {classes} classes configured"
                )));
            }
            Ok((samples, in_channels, classes))
        }
        (spec, None) => {
            if cfg.classes.is_some() {
                return Err(CliError::usage(
                    "classes applies to data_dir; set classes inside the synthetic spec",
                ));
            }
            let spec: SyntheticSpec = spec.unwrap_or_default();
            let samples = synth_dataset_with(
                spec.n,
                spec.classes,
                spec.size,
                spec.size,
                spec.shapes_per_class,
                seed,
            )?;
            Ok((samples, 1, spec.classes))
        }
    }
}

pub fn run(cfg: &RunConfig, out: &mut dyn Write) -> CliResult<()> {
    let weights_path = cfg
        .out
        .clone()
        .ok_or_else(|| CliError::usage("missing --out (weight file to write)"))?;
    if weights_path.is_dir() {
        return Err(CliError::usage(format!(
            "--out {} is a directory",
            weights_path.display()
        )));
    }
    let metrics_path = cfg
        .metrics
        .clone()
        .unwrap_or_else(|| weights_path.with_extension("csv"));
    if metrics_path == weights_path {
        return Err(CliError::usage("metrics and weights would overwrite each other"));
    }
    let train_cfg = TrainConfig {
        lr: cfg.lr.unwrap_or(trainer::DEFAULT_LR),
        epochs: cfg.epochs.unwrap_or(trainer::DESK_EPOCHS),
        seed: cfg.seed.unwrap_or(0),
    };
    train_cfg.validate()?;
    let channels = cfg.channels.clone().unwrap_or(DESK_CHANNELS.to_vec());
    if let Some(dir) = cfg.data_dir.as_deref() {
        if !dir.is_dir() {
            return Err(CliError {
                code: EXIT_IO,
                message: format!("{}: not a directory", dir.display()),
            });
        }
    }
    for path in [&weights_path, &metrics_path] {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            crate::ensure_dir(parent)?;
        }
    }

    let (samples, in_channels, classes) = dataset(cfg, train_cfg.seed)?;
    let model = UNetModel::new(UNetConfig {
        depth: channels.len(),
        channels,
        in_channels,
        num_classes: classes,
        seed: train_cfg.seed,
    })?;
    report!(
        out,
        "training {} parameters on {} images, {} epochs, lr {}",
        model.param_count(),
        samples.len(),
        train_cfg.epochs,
        train_cfg.lr
    )?;
    let (model, log) = trainer::train_with(model, &samples, &train_cfg, |e| {
        // Progress only; a broken pipe must not abort training.
        let _ = writeln!(
            out,
            "epoch {:>3}  loss {:.6}  f1 {:.4}  iou {:.4}",
            e.epoch, e.loss, e.f1, e.iou
        );
    })?;

    save_weights(&model, &weights_path)?;
    std::fs::write(&metrics_path, trainer::metrics_csv(&log)).map_err(|e| CliError {
        code: EXIT_IO,
        message: format!("{}: {e}", metrics_path.display()),
    })?;
    report!(out, "wrote {}", weights_path.display())?;
    report!(out, "wrote {}", metrics_path.display())?;
    Ok(())
}
