use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-pixel class ids, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<usize>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::shape(
                "label_map",
                "length",
                format!("{}x{} map needs {} labels, got {}", height, width, height * width, labels.len()),
            ));
        }
        Ok(LabelMap {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, class: usize) -> Self {
        LabelMap {
            height,
            width,
            labels: vec![class; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, i: usize, j: usize) -> usize {
        self.labels[i * self.width + j]
    }

    pub fn set(&mut self, i: usize, j: usize, class: usize) {
        self.labels[i * self.width + j] = class;
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.labels
    }

    pub fn max_label(&self) -> usize {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    pub fn count(&self, class: usize) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l >= num_classes) {
            Some(&class) => Err(Error::ClassOutOfRange { class, num_classes }),
            None => Ok(()),
        }
    }
}

/// Per-pixel argmax over the channel axis of `[1, classes, h, w]` logits.
/// Ties go to the lower class index.
pub fn predict_classes(logits: &Tensor) -> Result<LabelMap> {
    let (b, c, h, w) = logits.dims4()?;
    if b != 1 {
        return Err(Error::shape("predict_classes", "batch", format!("expected batch 1, got {b}")));
    }
    let plane = h * w;
    let x = logits.data();
    let labels = (0..plane)
        .map(|p| {
            let mut best = 0;
            for k in 1..c {
                if x[k * plane + p] > x[best * plane + p] {
                    best = k;
                }
            }
            best
        })
        .collect();
    LabelMap::new(h, w, labels)
}
