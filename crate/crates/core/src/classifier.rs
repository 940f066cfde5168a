//! A toy image classifier: two 3x3 conv + ReLU blocks, global average
//! pooling and a fully connected layer. Its logits are `[1, classes, 1, 1]`,
//! i.e. a segmentation output with a single pixel.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::{CapturePoint, Explainable, ForwardPass};
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const FEATURES: &str = "features";

#[derive(Clone, Debug, PartialEq)]
pub struct GapClassifier {
    pub conv1_weight: Tensor,
    pub conv1_bias: Tensor,
    pub conv2_weight: Tensor,
    pub conv2_bias: Tensor,
    /// `[classes, features, 1, 1]`.
    pub fc_weight: Tensor,
    pub fc_bias: Tensor,
}

impl GapClassifier {
    pub fn new(in_channels: usize, features: usize, num_classes: usize, seed: u64) -> Result<Self> {
        if in_channels == 0 || features == 0 {
            return Err(Error::config("features", "channel counts must be >= 1"));
        }
        if num_classes < 2 {
            return Err(Error::config("num_classes", "must be >= 2"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut he = |shape: &[usize]| {
            let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
            Tensor::from_fn(shape, |_| normal.sample(&mut rng))
        };
        Ok(GapClassifier {
            conv1_weight: he(&[features, in_channels, 3, 3]),
            conv1_bias: Tensor::zeros(&[features]),
            conv2_weight: he(&[features, features, 3, 3]),
            conv2_bias: Tensor::zeros(&[features]),
            fc_weight: he(&[num_classes, features, 1, 1]),
            fc_bias: Tensor::zeros(&[num_classes]),
        })
    }

    pub fn features(&self) -> usize {
        self.fc_weight.shape()[1]
    }

    /// Fully connected weights of class `c`, one per feature channel.
    pub fn class_weights(&self, c: usize) -> Result<&[f64]> {
        let classes = self.fc_weight.shape()[0];
        if c >= classes {
            return Err(Error::ClassOutOfRange {
                class: c,
                num_classes: classes,
            });
        }
        let k = self.features();
        Ok(&self.fc_weight.data()[c * k..(c + 1) * k])
    }
}

impl Explainable for GapClassifier {
    fn forward(&self, image: &Tensor) -> Result<ForwardPass> {
        let mut tape = Tape::new();
        let input = tape.leaf(image.clone());
        let names = [
            ("conv1.weight", &self.conv1_weight),
            ("conv1.bias", &self.conv1_bias),
            ("conv2.weight", &self.conv2_weight),
            ("conv2.bias", &self.conv2_bias),
            ("fc.weight", &self.fc_weight),
            ("fc.bias", &self.fc_bias),
        ];
        let params: Vec<_> = names
            .iter()
            .map(|(n, t)| (n.to_string(), tape.leaf((*t).clone())))
            .collect();
        let a = tape.conv2d(input, params[0].1, params[1].1, 1, 1)?;
        let a = tape.relu(a)?;
        let a = tape.conv2d(a, params[2].1, params[3].1, 1, 1)?;
        let features = tape.relu(a)?;
        let pooled = tape.global_avg_pool(features)?;
        let logits = tape.conv2d(pooled, params[4].1, params[5].1, 0, 1)?;
        let captures = vec![CapturePoint {
            name: FEATURES.to_string(),
            tensor: tape.value(features)?.clone(),
            node: features,
        }];
        Ok(ForwardPass {
            tape,
            input,
            logits,
            captures,
            params,
        })
    }

    fn num_classes(&self) -> usize {
        self.fc_weight.shape()[0]
    }

    fn layer_names(&self) -> Vec<String> {
        vec![FEATURES.to_string()]
    }

    fn default_layer(&self) -> String {
        FEATURES.to_string()
    }

    fn gap_fc_weights(&self, class: usize) -> Option<Result<Vec<f64>>> {
        Some(self.class_weights(class).map(<[f64]>::to_vec))
    }
}
