//! Single-sample SGD training with pixelwise cross-entropy.

mod data;
mod metrics;

pub use data::{
    class_level, split_indices, synth_dataset, synth_dataset_with, Sample, Shape, SyntheticSpec,
};
pub use metrics::{eval_metrics, ClassCounts, ClassScore, Confusion, Metrics};

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::label::{predict_classes, LabelMap};
use crate::model::ForwardPass;
use crate::tape::ScalarTarget;
use crate::tensor::Tensor;
use crate::unet::UNetModel;

pub const DEFAULT_LR: f64 = 3e-3;
pub const DESK_EPOCHS: usize = 30;
pub const PAPER_EPOCHS: usize = 300;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: DEFAULT_LR,
            epochs: DESK_EPOCHS,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn paper(seed: u64) -> Self {
        TrainConfig {
            epochs: PAPER_EPOCHS,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", format!("must be > 0, got {}", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be >= 1"));
        }
        Ok(())
    }
}

/// Mean pixelwise cross-entropy of `logits` against `label`, recorded on the
/// pass's tape.
pub fn cross_entropy_loss(pass: &mut ForwardPass, label: &LabelMap) -> Result<ScalarTarget> {
    let (_, c, h, w) = pass.logits().dims4()?;
    if (h, w) != (label.height(), label.width()) {
        return Err(Error::shape(
            "cross_entropy_loss",
            "spatial",
            format!("logits {h}x{w}, label {}x{}", label.height(), label.width()),
        ));
    }
    label.validate(c)?;
    let loss = pass.tape.cross_entropy(pass.logits, label.as_slice())?;
    pass.tape.scalar_target(loss)
}

/// `p <- p - lr * g` for every parameter; every parameter needs a gradient.
pub fn sgd_step<'a>(
    params: impl IntoIterator<Item = (&'a str, &'a mut Tensor)>,
    grads: &HashMap<String, Tensor>,
    lr: f64,
) -> Result<()> {
    for (name, p) in params {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing gradient for `{name}`")))?;
        if g.shape() != p.shape() {
            return Err(Error::shape(
                "sgd_step",
                "gradient",
                format!("`{name}`: {:?} vs {:?}", g.shape(), p.shape()),
            ));
        }
        for (v, d) in p.data_mut().iter_mut().zip(g.data()) {
            *v -= lr * d;
        }
    }
    Ok(())
}

/// One forward/backward/update on a single sample. Returns the loss and the
/// prediction made before the update.
pub fn train_step(model: &mut UNetModel, sample: &Sample, lr: f64) -> Result<(f64, LabelMap)> {
    let mut pass = model.forward(&sample.image)?;
    let prediction = predict_classes(pass.logits())?;
    let loss = cross_entropy_loss(&mut pass, &sample.label)?;
    let ids: Vec<_> = pass.params.iter().map(|(_, id)| *id).collect();
    let mut grads = pass.tape.backward(loss, &ids)?;
    let named: HashMap<String, Tensor> = pass
        .params
        .iter()
        .map(|(name, id)| (name.clone(), grads.remove(id).expect("requested gradient")))
        .collect();
    sgd_step(model.params_mut(), &named, lr)?;
    Ok((loss.value, prediction))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean training loss over the epoch.
    pub loss: f64,
    /// Macro F1 and IoU of the predictions made during the epoch.
    pub f1: f64,
    pub iou: f64,
}

/// Runs `config.epochs` epochs of shuffled single-sample SGD, calling
/// `on_epoch` after each one.
pub fn train_with(
    mut model: UNetModel,
    dataset: &[Sample],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(UNetModel, Vec<EpochLog>)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".to_string()));
    }
    let num_classes = model.config().num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut confusion = Confusion::new(num_classes);
        let mut total = 0.0;
        for &i in &order {
            let (loss, pred) = train_step(&mut model, &dataset[i], config.lr)?;
            if !loss.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "loss diverged at epoch {epoch} (lr {})",
                    config.lr
                )));
            }
            total += loss;
            confusion.add(&pred, &dataset[i].label)?;
        }
        let m = confusion.metrics();
        let entry = EpochLog {
            epoch,
            loss: total / dataset.len() as f64,
            f1: m.f1,
            iou: m.iou,
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok((model, log))
}

pub fn train(
    model: UNetModel,
    dataset: &[Sample],
    config: &TrainConfig,
) -> Result<(UNetModel, Vec<EpochLog>)> {
    train_with(model, dataset, config, |_| {})
}

/// Pooled macro metrics of `model` over `samples`.
pub fn evaluate(model: &UNetModel, samples: &[Sample]) -> Result<Metrics> {
    let mut confusion = Confusion::new(model.config().num_classes);
    for s in samples {
        let pass = model.forward(&s.image)?;
        confusion.add(&predict_classes(pass.logits())?, &s.label)?;
    }
    Ok(confusion.metrics())
}

/// `epoch,loss,f1,iou` with six decimals.
pub fn metrics_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,loss,f1,iou\n");
    for e in log {
        writeln!(out, "{},{:.6},{:.6},{:.6}", e.epoch, e.loss, e.f1, e.iou).expect("string write");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use crate::unet::UNetConfig;

    #[test]
    fn loss_zero_when_correct_class_dominates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[1, 2, 1, 2], |i| if i == 0 || i == 3 { 800.0 } else { 0.0 }));
        let loss = tape.cross_entropy(x, &[0, 1]).unwrap();
        assert_eq!(tape.value(loss).unwrap().data(), &[0.0]);
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 5, 3, 3], 0.7));
        let loss = tape.cross_entropy(x, &[4, 3, 2, 1, 0, 0, 1, 2, 3]).unwrap();
        assert!((tape.value(loss).unwrap().data()[0] - 5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn sgd_update_rule() {
        let mut p = Tensor::scalar(1.0);
        let grads = HashMap::from([("p".to_string(), Tensor::scalar(2.0))]);
        sgd_step([("p", &mut p)], &grads, 0.5).unwrap();
        assert_eq!(p.data(), &[0.0]);
        sgd_step([("p", &mut p)], &grads, 0.0).unwrap();
        assert_eq!(p.data(), &[0.0]);
        let err = sgd_step([("q", &mut p)], &grads, 0.5).unwrap_err();
        assert!(err.to_string().contains("missing gradient"));
    }

    #[test]
    fn zero_lr_leaves_model_unchanged() {
        let mut model = UNetModel::new(UNetConfig {
            depth: 2,
            channels: vec![4, 2],
            in_channels: 1,
            num_classes: 2,
            seed: 0,
        })
        .unwrap();
        let before = model.clone();
        let sample = &synth_dataset(1, 2, 16, 16, 0).unwrap()[0];
        train_step(&mut model, sample, 0.0).unwrap();
        assert_eq!(model, before);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert_eq!(TrainConfig::default().lr, 3e-3);
        assert_eq!(TrainConfig::paper(0).epochs, 300);
    }

    #[test]
    fn csv_format() {
        let log = [EpochLog {
            epoch: 1,
            loss: 0.5,
            f1: 1.0 / 3.0,
            iou: 0.2,
        }];
        assert_eq!(metrics_csv(&log), "epoch,loss,f1,iou\n1,0.500000,0.333333,0.200000\n");
    }
}
