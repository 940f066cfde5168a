use crate::error::{Error, Result};
use crate::label::LabelMap;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ClassCounts {
    fn present(&self) -> bool {
        self.tp + self.fp + self.fn_ > 0
    }

    pub fn iou(&self) -> f64 {
        self.tp as f64 / (self.tp + self.fp + self.fn_) as f64
    }

    pub fn f1(&self) -> f64 {
        2.0 * self.tp as f64 / (2 * self.tp + self.fp + self.fn_) as f64
    }
}

/// Per-class confusion counts, accumulated over any number of maps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    counts: Vec<ClassCounts>,
}

impl Confusion {
    pub fn new(num_classes: usize) -> Self {
        Confusion {
            counts: vec![ClassCounts::default(); num_classes],
        }
    }

    pub fn add(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        if (pred.height(), pred.width()) != (truth.height(), truth.width()) {
            return Err(Error::shape(
                "eval_metrics",
                "spatial",
                format!(
                    "prediction {}x{} vs truth {}x{}",
                    pred.height(),
                    pred.width(),
                    truth.height(),
                    truth.width()
                ),
            ));
        }
        let n = self.counts.len();
        pred.validate(n)?;
        truth.validate(n)?;
        for (&p, &t) in pred.as_slice().iter().zip(truth.as_slice()) {
            if p == t {
                self.counts[p].tp += 1;
            } else {
                self.counts[p].fp += 1;
                self.counts[t].fn_ += 1;
            }
        }
        Ok(())
    }

    pub fn class_counts(&self) -> &[ClassCounts] {
        &self.counts
    }

    /// Macro averages over classes present in truth or prediction.
    pub fn metrics(&self) -> Metrics {
        let per_class: Vec<Option<ClassScore>> = self
            .counts
            .iter()
            .map(|c| {
                c.present().then(|| ClassScore {
                    f1: c.f1(),
                    iou: c.iou(),
                })
            })
            .collect();
        let present: Vec<_> = per_class.iter().flatten().collect();
        let n = present.len().max(1) as f64;
        Metrics {
            f1: present.iter().map(|s| s.f1).sum::<f64>() / n,
            iou: present.iter().map(|s| s.iou).sum::<f64>() / n,
            per_class,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassScore {
    pub f1: f64,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub f1: f64,
    pub iou: f64,
    /// `None` for classes absent from both prediction and truth.
    pub per_class: Vec<Option<ClassScore>>,
}

/// Macro-averaged F1 and IoU of one prediction against the truth.
pub fn eval_metrics(pred: &LabelMap, truth: &LabelMap, num_classes: usize) -> Result<Metrics> {
    let mut c = Confusion::new(num_classes);
    c.add(pred, truth)?;
    Ok(c.metrics())
}
