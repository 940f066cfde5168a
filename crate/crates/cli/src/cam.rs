//! `camscope cam`.

use std::io::Write;
use std::path::{Path, PathBuf};

use camscope::cam::{layer_gradient, resolve_pixel_set, Method, PixelSetSpec};
use camscope::render::{
    self, heatmap_overlay, read_pgm_ppm, render_labels, render_pixel_set, write_ppm, RgbImage,
};
use camscope::unet::{load_weights, BOTTLENECK};
use camscope::{Explainable, LabelMap};

use crate::config::RunConfig;
use crate::{CliError, CliResult};

pub const KEYS: [&str; 12] = [
    "model",
    "image",
    "method",
    "layer",
    "pixel_set",
    "class",
    "relu_order",
    "xres_window",
    "target",
    "normalize",
    "alpha",
    "out_dir",
];

pub const DEFAULT_XRES_WINDOW: usize = 2;

/// Resolves a comma list of method names; `all` means every segmentation
/// method.
pub fn parse_methods(list: &str) -> CliResult<Vec<Method>> {
    let valid = || Method::SEGMENTATION.map(Method::name).join(", ");
    let mut methods = Vec::new();
    for name in list.split(',').map(str::trim) {
        let picked: Vec<Method> = if name == "all" {
            Method::SEGMENTATION.to_vec()
        } else {
            let m: Method = name
                .parse()
                .map_err(|_| CliError::usage(format!("unknown method `{name}` (valid: {}, all)", valid())))?;
            if !Method::SEGMENTATION.contains(&m) {
                return Err(CliError::usage(format!(
                    "method `{name}` needs a classification head; a U-Net supports {}, all",
                    valid()
                )));
            }
            vec![m]
        };
        for m in picked {
            if !methods.contains(&m) {
                methods.push(m);
            }
        }
    }
    Ok(methods)
}

/// Resolves a comma list of capture points; `all` means every one.
pub fn parse_layers(list: &str, model: &dyn Explainable) -> CliResult<Vec<String>> {
    let names = model.layer_names();
    let mut layers = Vec::new();
    for name in list.split(',').map(str::trim) {
        if name == "all" {
            layers.extend(names.iter().cloned());
        } else if names.iter().any(|n| n == name) {
            layers.push(name.to_string());
        } else {
            return Err(CliError::usage(format!(
                "unknown layer `{name}` (valid: {}, all)",
                names.join(", ")
            )));
        }
    }
    layers.dedup();
    Ok(layers)
}

/// File name of one overlay: `<method>_<layer>.ppm` with dots replaced.
pub fn overlay_name(method: Method, layer: &str) -> String {
    format!("{}_{}.ppm", method.name(), layer.replace('.', "_"))
}

fn required<'a>(v: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a Path> {
    v.as_deref()
        .ok_or_else(|| CliError::usage(format!("missing --{flag}")))
}

pub fn run(cfg: &RunConfig, out: &mut dyn Write) -> CliResult<()> {
    let model_path = required(&cfg.model, "model")?;
    let image_path = required(&cfg.image, "image")?;
    let out_dir = required(&cfg.out_dir, "out-dir")?;
    let methods = parse_methods(cfg.method.as_deref().unwrap_or("seg_grad"))?;
    let pixels = cfg.pixel_set.clone().unwrap_or(PixelSetSpec::WholeImage);
    let class = match (cfg.class, &pixels) {
        (Some(c), _) => c,
        (None, PixelSetSpec::PredictedClass(c)) => *c,
        (None, _) => {
            return Err(CliError::usage(
                "missing --class (only class:<c> pixel sets imply one)",
            ))
        }
    };
    let window = cfg.xres_window.unwrap_or(DEFAULT_XRES_WINDOW);
    let alpha = cfg.alpha.unwrap_or(render::DEFAULT_ALPHA);
    if !(0.0..=1.0).contains(&alpha) {
        return Err(CliError::usage(format!("alpha {alpha} outside [0, 1]")));
    }
    let order = cfg.relu_order.unwrap_or_default();
    let target = cfg.target.unwrap_or_default();
    let normalize = cfg.normalize.unwrap_or_default();

    let model = load_weights(model_path).map_err(|e| CliError::input(model_path, e))?;
    let image = read_pgm_ppm(image_path).map_err(|e| CliError::input(image_path, e))?;
    let layers = parse_layers(cfg.layer.as_deref().unwrap_or(BOTTLENECK), &model)?;
    if class >= model.num_classes() {
        return Err(CliError::usage(format!(
            "class {class} out of range for a {}-class model",
            model.num_classes()
        )));
    }
    let in_channels = image.shape()[1];
    if in_channels != model.config().in_channels {
        return Err(CliError::usage(format!(
            "{} has {in_channels} channels, the model expects {}",
            image_path.display(),
            model.config().in_channels
        )));
    }
    let (_, _, h, w) = image.dims4()?;
    resolve_pixel_set(&pixels, &LabelMap::filled(h, w, 0))?;
    crate::ensure_dir(out_dir)?;

    let base = RgbImage::from_tensor(&image)?;
    let mut written = Vec::new();
    for (k, layer) in layers.iter().enumerate() {
        let grad = layer_gradient(&model, &image, class, &pixels, Some(layer), target)?;
        if k == 0 {
            report!(
                out,
                "class {class}, pixel set {pixels} ({} pixels), target {:.6}",
                grad.pixels.len(),
                grad.target
            )?;
            let path = out_dir.join("prediction.ppm");
            write_ppm(&render_labels(&grad.prediction), &path)?;
            written.push(path);
            let path = out_dir.join("pixelset.ppm");
            write_ppm(&render_pixel_set(&base, &grad.pixels)?, &path)?;
            written.push(path);
        }
        if let Some(w) = &grad.warning {
            report!(out, "warning: {w}")?;
        }
        for &method in &methods {
            let heatmap = grad.heatmap(method, window, order)?;
            let path = out_dir.join(overlay_name(method, layer));
            write_ppm(&heatmap_overlay(&base, &heatmap.post_relu, normalize, alpha)?, &path)?;
            written.push(path);
        }
    }
    for path in written {
        report!(out, "wrote {}", path.display())?;
    }
    Ok(())
}
