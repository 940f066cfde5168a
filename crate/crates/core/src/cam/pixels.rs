//! Pixel sets: which output pixels a segmentation CAM explains.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::label::LabelMap;

/// How a pixel set is chosen. Coordinates: `x` is the column, `y` the row;
/// points are `(row, col)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PixelSetSpec {
    WholeImage,
    /// Every pixel predicted as this class.
    PredictedClass(usize),
    /// Inclusive rectangle.
    Rect { x0: usize, y0: usize, x1: usize, y1: usize },
    Points(Vec<(usize, usize)>),
}

impl fmt::Display for PixelSetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PixelSetSpec::WholeImage => write!(f, "whole"),
            PixelSetSpec::PredictedClass(c) => write!(f, "class:{c}"),
            PixelSetSpec::Rect { x0, y0, x1, y1 } => write!(f, "rect:{x0},{y0},{x1},{y1}"),
            PixelSetSpec::Points(pts) => {
                write!(f, "point:")?;
                for (k, (i, j)) in pts.iter().enumerate() {
                    if k > 0 {
                        write!(f, ";")?;
                    }
                    write!(f, "{i},{j}")?;
                }
                Ok(())
            }
        }
    }
}

fn parse_usize(text: &str, offset: usize) -> Result<usize> {
    text.trim().parse().map_err(|_| Error::Parse {
        offset,
        message: format!("`{text}` is not a non-negative integer"),
    })
}

fn parse_list(text: &str, offset: usize, expected: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(expected);
    let mut at = offset;
    for part in text.split(',') {
        out.push(parse_usize(part, at)?);
        at += part.len() + 1;
    }
    if out.len() != expected {
        return Err(Error::Parse {
            offset,
            message: format!("expected {expected} comma-separated values, got {}", out.len()),
        });
    }
    Ok(out)
}

/// Parses `whole`, `class:<c>`, `rect:x0,y0,x1,y1` or `point:i,j[;i,j...]`.
impl FromStr for PixelSetSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "whole" {
            return Ok(PixelSetSpec::WholeImage);
        }
        let (kind, rest) = s.split_once(':').ok_or_else(|| Error::Parse {
            offset: 0,
            message: format!("unknown pixel set `{s}` (expected whole, class:<c>, rect:x0,y0,x1,y1 or point:i,j)"),
        })?;
        let at = kind.len() + 1;
        match kind {
            "class" => Ok(PixelSetSpec::PredictedClass(parse_usize(rest, at)?)),
            "rect" => {
                let v = parse_list(rest, at, 4)?;
                Ok(PixelSetSpec::Rect {
                    x0: v[0],
                    y0: v[1],
                    x1: v[2],
                    y1: v[3],
                })
            }
            "point" | "points" => {
                let mut pts = Vec::new();
                let mut offset = at;
                for part in rest.split(';') {
                    let v = parse_list(part, offset, 2)?;
                    pts.push((v[0], v[1]));
                    offset += part.len() + 1;
                }
                Ok(PixelSetSpec::Points(pts))
            }
            other => Err(Error::Parse {
                offset: 0,
                message: format!("unknown pixel set kind `{other}`"),
            }),
        }
    }
}

/// A resolved set of output pixels `(row, col)`, sorted and unique.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PixelSet {
    pub spec: PixelSetSpec,
    pub height: usize,
    pub width: usize,
    indices: Vec<(usize, usize)>,
}

impl PixelSet {
    /// Builds a set directly from pixel coordinates.
    pub fn from_points(height: usize, width: usize, mut points: Vec<(usize, usize)>) -> Result<Self> {
        if let Some(&(i, j)) = points.iter().find(|&&(i, j)| i >= height || j >= width) {
            return Err(Error::PixelSet(format!(
                "point ({i},{j}) outside {height}x{width}"
            )));
        }
        points.sort_unstable();
        points.dedup();
        Ok(PixelSet {
            spec: PixelSetSpec::Points(points.clone()),
            height,
            width,
            indices: points,
        })
    }

    pub fn indices(&self) -> &[(usize, usize)] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.indices.binary_search(&(i, j)).is_ok()
    }

    /// Flat indices into `[1, classes, h, w]` logits for `class`.
    pub fn flat_indices(&self, class: usize) -> Vec<usize> {
        let plane = self.height * self.width;
        self.indices
            .iter()
            .map(|&(i, j)| class * plane + i * self.width + j)
            .collect()
    }
}

/// Resolves `spec` at the resolution of `prediction`.
pub fn resolve_pixel_set(spec: &PixelSetSpec, prediction: &LabelMap) -> Result<PixelSet> {
    let (h, w) = (prediction.height(), prediction.width());
    let indices = match spec {
        PixelSetSpec::WholeImage => (0..h).flat_map(|i| (0..w).map(move |j| (i, j))).collect(),
        PixelSetSpec::PredictedClass(c) => (0..h)
            .flat_map(|i| (0..w).map(move |j| (i, j)))
            .filter(|&(i, j)| prediction.get(i, j) == *c)
            .collect(),
        &PixelSetSpec::Rect { x0, y0, x1, y1 } => {
            if x0 > x1 || y0 > y1 {
                return Err(Error::PixelSet(format!(
                    "rect ({x0},{y0})-({x1},{y1}) has inverted corners"
                )));
            }
            if x1 >= w || y1 >= h {
                return Err(Error::PixelSet(format!(
                    "rect ({x0},{y0})-({x1},{y1}) outside {h}x{w} image"
                )));
            }
            (y0..=y1).flat_map(|i| (x0..=x1).map(move |j| (i, j))).collect()
        }
        PixelSetSpec::Points(pts) => {
            let mut set = PixelSet::from_points(h, w, pts.clone())?;
            set.spec = spec.clone();
            return Ok(set);
        }
    };
    Ok(PixelSet {
        spec: spec.clone(),
        height: h,
        width: w,
        indices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn whole_image_covers_every_pixel() {
        let set = resolve_pixel_set(&PixelSetSpec::WholeImage, &LabelMap::filled(4, 4, 0)).unwrap();
        assert_eq!(set.len(), 16);
    }

    #[test]
    fn absent_class_is_empty() {
        let set =
            resolve_pixel_set(&PixelSetSpec::PredictedClass(1), &LabelMap::filled(4, 4, 0)).unwrap();
        assert!(set.is_empty());
    }

    #[test]
    fn predicted_class_selects_matching_pixels() {
        let pred = LabelMap::new(2, 3, vec![0, 2, 2, 1, 2, 0]).unwrap();
        let set = resolve_pixel_set(&PixelSetSpec::PredictedClass(2), &pred).unwrap();
        assert_eq!(set.indices(), &[(0, 1), (0, 2), (1, 1)]);
        assert_eq!(set.flat_indices(2), vec![13, 14, 16]);
    }

    #[test]
    fn rect_is_inclusive() {
        let spec = PixelSetSpec::Rect {
            x0: 1,
            y0: 1,
            x1: 2,
            y1: 2,
        };
        let set = resolve_pixel_set(&spec, &LabelMap::filled(4, 4, 0)).unwrap();
        assert_eq!(set.indices(), &[(1, 1), (1, 2), (2, 1), (2, 2)]);
    }

    #[test]
    fn rect_rows_and_columns_are_distinct() {
        let spec = PixelSetSpec::Rect {
            x0: 2,
            y0: 0,
            x1: 3,
            y1: 0,
        };
        let set = resolve_pixel_set(&spec, &LabelMap::filled(2, 4, 0)).unwrap();
        assert_eq!(set.indices(), &[(0, 2), (0, 3)]);
    }

    #[test]
    fn out_of_bounds_rejected() {
        let pred = LabelMap::filled(4, 4, 0);
        let spec = PixelSetSpec::Rect {
            x0: 1,
            y0: 1,
            x1: 4,
            y1: 2,
        };
        assert!(matches!(resolve_pixel_set(&spec, &pred), Err(Error::PixelSet(_))));
        let spec = PixelSetSpec::Points(vec![(0, 0), (4, 0)]);
        assert!(resolve_pixel_set(&spec, &pred).is_err());
    }

    #[test]
    fn parse_round_trips_display() {
        for text in ["whole", "class:2", "rect:1,2,3,4", "point:5,6", "point:1,2;3,4"] {
            let spec: PixelSetSpec = text.parse().unwrap();
            assert_eq!(spec.to_string(), text);
        }
        for bad in ["", "class:", "rect:1,2,3", "point:1", "blob:1", "class:-1"] {
            assert!(bad.parse::<PixelSetSpec>().is_err(), "{bad}");
        }
    }
}
