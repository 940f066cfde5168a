//! Heatmap colouring, overlays and image files.

mod pnm;

pub use pnm::{
    decode_pnm, encode_pgm, encode_ppm, read_pgm_ppm, read_pnm, write_pgm, write_ppm, Pnm,
};

use std::str::FromStr;

use crate::cam::{Map2d, PixelSet};
use crate::error::{Error, Result};
use crate::label::LabelMap;
use crate::tensor::Tensor;

pub const DEFAULT_ALPHA: f64 = 0.5;

/// 8-bit RGB, row-major, interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::shape(
                "rgb_image",
                "data",
                format!("{} bytes for {width}x{height}", data.len()),
            ));
        }
        Ok(RgbImage {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        RgbImage {
            width,
            height,
            data: rgb.repeat(width * height),
        }
    }

    pub fn pixel(&self, i: usize, j: usize) -> [u8; 3] {
        let k = 3 * (i * self.width + j);
        [self.data[k], self.data[k + 1], self.data[k + 2]]
    }

    pub fn set_pixel(&mut self, i: usize, j: usize, rgb: [u8; 3]) {
        let k = 3 * (i * self.width + j);
        self.data[k..k + 3].copy_from_slice(&rgb);
    }

    /// A `[1, 1, h, w]` (gray) or `[1, 3, h, w]` tensor with values in
    /// `[0, 1]`; values outside are clamped.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (b, c, h, w) = t.dims4()?;
        if b != 1 || !(c == 1 || c == 3) {
            return Err(Error::shape(
                "rgb_from_tensor",
                "channels",
                format!("expected [1,1|3,h,w], got {:?}", t.shape()),
            ));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(3 * plane);
        for p in 0..plane {
            for ch in 0..3 {
                let v = t.data()[(ch % c) * plane + p];
                data.push(to_u8(v.clamp(0.0, 1.0) * 255.0));
            }
        }
        Ok(RgbImage {
            width: w,
            height: h,
            data,
        })
    }

    /// Images placed left to right, separated by `gap` white columns.
    pub fn hconcat(images: &[RgbImage], gap: usize) -> Result<RgbImage> {
        let first = images
            .first()
            .ok_or_else(|| Error::InvalidArgument("nothing to concatenate".to_string()))?;
        let h = first.height;
        if let Some(bad) = images.iter().find(|im| im.height != h) {
            return Err(Error::shape(
                "hconcat",
                "height",
                format!("{} vs {}", bad.height, h),
            ));
        }
        let width = images.iter().map(|im| im.width).sum::<usize>() + gap * (images.len() - 1);
        let mut out = RgbImage::filled(width, h, [255, 255, 255]);
        let mut x = 0;
        for im in images {
            for i in 0..h {
                let src = &im.data[3 * i * im.width..3 * (i + 1) * im.width];
                let at = 3 * (i * width + x);
                out.data[at..at + src.len()].copy_from_slice(src);
            }
            x += im.width + gap;
        }
        Ok(out)
    }
}

/// Round half up to the nearest byte.
fn to_u8(v: f64) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NormalizeMode {
    /// Min maps to 0 and max to 1; a constant map becomes 0.5.
    #[default]
    MinMax,
    /// Values are clamped to `[0, 1]`.
    None,
}

impl std::fmt::Display for NormalizeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NormalizeMode::MinMax => "minmax",
            NormalizeMode::None => "none",
        })
    }
}

impl FromStr for NormalizeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "minmax" => Ok(NormalizeMode::MinMax),
            "none" => Ok(NormalizeMode::None),
            other => Err(Error::InvalidArgument(format!(
                "unknown normalization `{other}` (expected minmax or none)"
            ))),
        }
    }
}

pub fn normalize_heatmap(map: &Map2d, mode: NormalizeMode) -> Map2d {
    let data = match mode {
        NormalizeMode::MinMax => {
            let (lo, hi) = (map.min(), map.max());
            if hi > lo {
                map.data.iter().map(|&v| (v - lo) / (hi - lo)).collect()
            } else {
                vec![0.5; map.data.len()]
            }
        }
        NormalizeMode::None => map.data.iter().map(|&v| v.clamp(0.0, 1.0)).collect(),
    };
    Map2d { data, ..*map }
}

/// Anchor positions and colours of the jet palette.
pub const JET: [(f64, [u8; 3]); 6] = [
    (0.0, [0, 0, 131]),
    (0.125, [0, 60, 170]),
    (0.375, [5, 255, 255]),
    (0.625, [255, 255, 0]),
    (0.875, [250, 0, 0]),
    (1.0, [128, 0, 0]),
];

/// Piecewise-linear jet colour of `v` in `[0, 1]`.
pub fn jet(v: f64) -> Result<[u8; 3]> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::InvalidArgument(format!(
            "colormap input {v} outside [0, 1]"
        )));
    }
    let seg = JET
        .windows(2)
        .position(|w| v <= w[1].0)
        .expect("v <= 1 lands in a segment");
    let ((x0, c0), (x1, c1)) = (JET[seg], JET[seg + 1]);
    let t = (v - x0) / (x1 - x0);
    Ok(std::array::from_fn(|k| {
        to_u8(c0[k] as f64 + t * (c1[k] as f64 - c0[k] as f64))
    }))
}

/// Colours a map already scaled to `[0, 1]`.
pub fn apply_colormap(map01: &Map2d) -> Result<RgbImage> {
    let mut data = Vec::with_capacity(3 * map01.data.len());
    for &v in &map01.data {
        data.extend_from_slice(&jet(v)?);
    }
    RgbImage::new(map01.width, map01.height, data)
}

/// `round((1 - alpha) * base + alpha * heat)` per channel.
pub fn overlay(base: &RgbImage, heat: &RgbImage, alpha: f64) -> Result<RgbImage> {
    if (base.width, base.height) != (heat.width, heat.height) {
        return Err(Error::shape(
            "overlay",
            "extent",
            format!(
                "base {}x{}, heat {}x{}",
                base.width, base.height, heat.width, heat.height
            ),
        ));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    let data = base
        .data
        .iter()
        .zip(&heat.data)
        .map(|(&b, &h)| to_u8((1.0 - alpha) * b as f64 + alpha * h as f64))
        .collect();
    Ok(RgbImage { data, ..*base })
}

/// Normalises, colours and blends a heatmap over `base`.
pub fn heatmap_overlay(
    base: &RgbImage,
    map: &Map2d,
    mode: NormalizeMode,
    alpha: f64,
) -> Result<RgbImage> {
    overlay(base, &apply_colormap(&normalize_heatmap(map, mode))?, alpha)
}

/// Fixed colour per class; class 0 is black.
pub fn class_color(class: usize) -> [u8; 3] {
    const PALETTE: [[u8; 3]; 8] = [
        [0, 0, 0],
        [230, 25, 75],
        [60, 180, 75],
        [0, 130, 200],
        [255, 225, 25],
        [145, 30, 180],
        [70, 240, 240],
        [245, 130, 48],
    ];
    PALETTE[class % PALETTE.len()]
}

/// A label map drawn with [`class_color`].
pub fn render_labels(labels: &LabelMap) -> RgbImage {
    let data = labels
        .as_slice()
        .iter()
        .flat_map(|&c| class_color(c))
        .collect();
    RgbImage {
        width: labels.width(),
        height: labels.height(),
        data,
    }
}

/// `base` with the pixels of `set` tinted red and everything else dimmed.
pub fn render_pixel_set(base: &RgbImage, set: &PixelSet) -> Result<RgbImage> {
    if (base.height, base.width) != (set.height, set.width) {
        return Err(Error::shape(
            "render_pixel_set",
            "extent",
            format!(
                "image {}x{}, pixel set {}x{}",
                base.height, base.width, set.height, set.width
            ),
        ));
    }
    let mut out = overlay(base, &RgbImage::filled(base.width, base.height, [0, 0, 0]), 0.5)?;
    for &(i, j) in set.indices() {
        let p = base.pixel(i, j);
        out.set_pixel(i, j, [255, p[1] / 2, p[2] / 2]);
    }
    Ok(out)
}
