//! Synthetic shapes dataset: one filled shape type per foreground class on a
//! noisy class-0 background.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::label::LabelMap;
use crate::tensor::Tensor;

const BACKGROUND_LEVEL: f64 = 0.2;
const NOISE: f64 = 0.08;
const PLACEMENT_ATTEMPTS: usize = 500;

/// A geometric shape in pixel coordinates (row `y`, column `x`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Disc { cy: i64, cx: i64, r: i64 },
    /// Inclusive corners.
    Rect { y0: i64, x0: i64, y1: i64, x1: i64 },
    /// Pixels with `inner^2 < d^2 <= outer^2`.
    Ring { cy: i64, cx: i64, outer: i64, inner: i64 },
}

impl Shape {
    pub fn contains(&self, y: i64, x: i64) -> bool {
        match *self {
            Shape::Disc { cy, cx, r } => (x - cx).pow(2) + (y - cy).pow(2) <= r * r,
            Shape::Rect { y0, x0, y1, x1 } => (y0..=y1).contains(&y) && (x0..=x1).contains(&x),
            Shape::Ring {
                cy,
                cx,
                outer,
                inner,
            } => {
                let d2 = (x - cx).pow(2) + (y - cy).pow(2);
                d2 <= outer * outer && d2 > inner * inner
            }
        }
    }

    /// Inclusive bounding box `(y0, x0, y1, x1)`.
    pub fn bounds(&self) -> (i64, i64, i64, i64) {
        match *self {
            Shape::Disc { cy, cx, r } => (cy - r, cx - r, cy + r, cx + r),
            Shape::Rect { y0, x0, y1, x1 } => (y0, x0, y1, x1),
            Shape::Ring { cy, cx, outer, .. } => (cy - outer, cx - outer, cy + outer, cx + outer),
        }
    }
}

/// One training image with its exact label mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[1, 1, h, w]`, values in `[0, 1]`.
    pub image: Tensor,
    pub label: LabelMap,
    /// Shapes drawn, with their class.
    pub shapes: Vec<(usize, Shape)>,
}

impl Sample {
    pub fn new(image: Tensor, label: LabelMap) -> Result<Self> {
        let (_, _, h, w) = image.dims4()?;
        if (h, w) != (label.height(), label.width()) {
            return Err(Error::shape(
                "sample",
                "spatial",
                format!("image {h}x{w}, label {}x{}", label.height(), label.width()),
            ));
        }
        Ok(Sample {
            image,
            label,
            shapes: Vec::new(),
        })
    }
}

/// `n=64,classes=3,size=64[,shapes=1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub n: usize,
    pub classes: usize,
    pub size: usize,
    pub shapes_per_class: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n: 64,
            classes: 3,
            size: 64,
            shapes_per_class: 1,
        }
    }
}

impl FromStr for SyntheticSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut spec = SyntheticSpec::default();
        let mut offset = 0;
        for part in s.split(',') {
            let (key, value) = part.split_once('=').ok_or_else(|| Error::Parse {
                offset,
                message: format!("expected key=value, got `{part}`"),
            })?;
            let value: usize = value.trim().parse().map_err(|_| Error::Parse {
                offset: offset + key.len() + 1,
                message: format!("`{value}` is not a non-negative integer"),
            })?;
            match key.trim() {
                "n" => spec.n = value,
                "classes" => spec.classes = value,
                "size" => spec.size = value,
                "shapes" => spec.shapes_per_class = value,
                other => {
                    return Err(Error::Parse {
                        offset,
                        message: format!("unknown key `{other}` (expected n, classes, size, shapes)"),
                    })
                }
            }
            offset += part.len() + 1;
        }
        Ok(spec)
    }
}

impl std::fmt::Display for SyntheticSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "n={},classes={},size={}", self.n, self.classes, self.size)?;
        if self.shapes_per_class != 1 {
            write!(f, ",shapes={}", self.shapes_per_class)?;
        }
        Ok(())
    }
}

/// Mean intensity of class `c`; foreground classes are spread over [0.5, 0.9].
pub fn class_level(class: usize, num_classes: usize) -> f64 {
    if class == 0 {
        return BACKGROUND_LEVEL;
    }
    if num_classes <= 2 {
        return 0.7;
    }
    0.5 + 0.4 * (class - 1) as f64 / (num_classes - 2) as f64
}

/// Draws `n` samples of `height` x `width`. Each foreground class gets
/// `shapes_per_class` non-overlapping shapes: class 1 discs, class 2
/// rectangles, class 3 rings, repeating for further classes.
pub fn synth_dataset_with(
    n: usize,
    num_classes: usize,
    height: usize,
    width: usize,
    shapes_per_class: usize,
    seed: u64,
) -> Result<Vec<Sample>> {
    if num_classes < 2 {
        return Err(Error::config("classes", format!("must be >= 2, got {num_classes}")));
    }
    if height == 0 || width == 0 {
        return Err(Error::config("size", "canvas must be non-empty"));
    }
    let min_size = (height.min(width) / 8).max(2);
    let max_size = (height.min(width) / 5).max(min_size);
    let shapes = (num_classes - 1) * shapes_per_class;
    let box_area = (2 * min_size + 2).pow(2);
    if shapes * box_area > height * width {
        return Err(Error::config(
            "shapes",
            format!(
                "{shapes} shapes of at least {0}x{0} pixels exceed the {height}x{width} canvas",
                2 * min_size + 1
            ),
        ));
    }
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            draw_sample(&mut rng, num_classes, height, width, shapes_per_class, min_size, max_size)
        })
        .collect()
}

/// One shape per foreground class.
pub fn synth_dataset(
    n: usize,
    num_classes: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<Vec<Sample>> {
    synth_dataset_with(n, num_classes, height, width, 1, seed)
}

fn draw_sample(
    rng: &mut ChaCha8Rng,
    num_classes: usize,
    height: usize,
    width: usize,
    shapes_per_class: usize,
    min_size: usize,
    max_size: usize,
) -> Result<Sample> {
    let (h, w) = (height as i64, width as i64);
    let mut placed: Vec<(usize, Shape)> = Vec::new();
    for class in 1..num_classes {
        for _ in 0..shapes_per_class {
            let mut found = None;
            for _ in 0..PLACEMENT_ATTEMPTS {
                let s = rng.random_range(min_size..=max_size) as i64;
                let (hy, hx) = match (class - 1) % 3 {
                    1 => (
                        rng.random_range((2 * s / 3).max(1)..=s),
                        rng.random_range((2 * s / 3).max(1)..=s),
                    ),
                    _ => (s, s),
                };
                if 2 * hy + 1 > h || 2 * hx + 1 > w {
                    continue;
                }
                let cy = rng.random_range(hy..h - hy);
                let cx = rng.random_range(hx..w - hx);
                let shape = match (class - 1) % 3 {
                    0 => Shape::Disc { cy, cx, r: s },
                    1 => Shape::Rect {
                        y0: cy - hy,
                        x0: cx - hx,
                        y1: cy + hy,
                        x1: cx + hx,
                    },
                    _ => Shape::Ring {
                        cy,
                        cx,
                        outer: s,
                        inner: (s / 2).max(1),
                    },
                };
                let (y0, x0, y1, x1) = shape.bounds();
                let clear = placed.iter().all(|(_, other)| {
                    let (oy0, ox0, oy1, ox1) = other.bounds();
                    y1 + 1 < oy0 || oy1 + 1 < y0 || x1 + 1 < ox0 || ox1 + 1 < x0
                });
                if clear {
                    found = Some(shape);
                    break;
                }
            }
            let shape = found.ok_or_else(|| {
                Error::config(
                    "shapes",
                    format!("could not place {shapes_per_class} shapes per class on a {height}x{width} canvas"),
                )
            })?;
            placed.push((class, shape));
        }
    }

    let mut label = LabelMap::filled(height, width, 0);
    for &(class, shape) in &placed {
        let (y0, x0, y1, x1) = shape.bounds();
        for y in y0.max(0)..=y1.min(h - 1) {
            for x in x0.max(0)..=x1.min(w - 1) {
                if shape.contains(y, x) {
                    label.set(y as usize, x as usize, class);
                }
            }
        }
    }
    let data = label
        .as_slice()
        .iter()
        .map(|&c| {
            let v = class_level(c, num_classes) + rng.random_range(-NOISE..NOISE);
            v.clamp(0.0, 1.0)
        })
        .collect();
    let image = Tensor::new(vec![1, 1, height, width], data)?;
    Ok(Sample {
        image,
        label,
        shapes: placed,
    })
}

/// Fixed 80/10/10 split of `0..n` after a seeded shuffle.
pub fn split_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let train = n * 8 / 10;
    let val = n / 10;
    let test = idx.split_off(train + val);
    let val_part = idx.split_off(train);
    (idx, val_part, test)
}
