//! Encoder-decoder U-Net producing per-pixel class logits.
//!
//! Level 0 is the full-resolution level; level `depth - 1` is the bottleneck.
//! Each encoder level runs two 3x3 conv + ReLU blocks, is captured as
//! `enc{n}.post`, then max-pooled by 2. The decoder upsamples by nearest
//! neighbour, applies a 3x3 `up` conv, concatenates the matching skip and
//! runs two conv + ReLU blocks, captured as `dec{n}.post`. A 1x1 conv maps the
//! top level to class logits.

mod weights;

pub use weights::{decode_weights, encode_weights, load_weights, load_weights_as, save_weights};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::{CapturePoint, Explainable, ForwardPass};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Deepest supported network; keeps `2^(depth-1)` and file parsing sane.
pub const MAX_DEPTH: usize = 16;

pub const BOTTLENECK: &str = "bottleneck";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UNetConfig {
    pub depth: usize,
    /// Channel width per level, deepest first.
    pub channels: Vec<usize>,
    pub in_channels: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl UNetConfig {
    /// Depth four with widths 512/256/128/64.
    pub fn paper(in_channels: usize, num_classes: usize, seed: u64) -> Self {
        UNetConfig {
            depth: 4,
            channels: vec![512, 256, 128, 64],
            in_channels,
            num_classes,
            seed,
        }
    }

    /// Depth four with widths 64/32/16/8; runs at desk scale.
    pub fn desk(in_channels: usize, num_classes: usize, seed: u64) -> Self {
        UNetConfig {
            depth: 4,
            channels: vec![64, 32, 16, 8],
            in_channels,
            num_classes,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::config("depth", format!("must be >= 2, got {}", self.depth)));
        }
        if self.depth > MAX_DEPTH {
            return Err(Error::config(
                "depth",
                format!("must be <= {MAX_DEPTH}, got {}", self.depth),
            ));
        }
        if self.channels.len() != self.depth {
            return Err(Error::config(
                "channels",
                format!("expected {} entries, got {}", self.depth, self.channels.len()),
            ));
        }
        if self.channels.contains(&0) {
            return Err(Error::config("channels", "every width must be >= 1"));
        }
        if self.in_channels == 0 {
            return Err(Error::config("in_channels", "must be >= 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::config(
                "num_classes",
                format!("must be >= 2, got {}", self.num_classes),
            ));
        }
        Ok(())
    }

    /// Required divisor of the input height and width.
    pub fn divisor(&self) -> usize {
        1 << (self.depth - 1)
    }

    /// Width of `level`, where level 0 is full resolution.
    pub fn width_at(&self, level: usize) -> usize {
        self.channels[self.depth - 1 - level]
    }

    /// Parameter names and shapes in model order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut conv = |name: String, cout: usize, cin: usize, k: usize| {
            out.push((format!("{name}.weight"), vec![cout, cin, k, k]));
            out.push((format!("{name}.bias"), vec![cout]));
        };
        let d = self.depth;
        for level in 0..d - 1 {
            let cin = if level == 0 {
                self.in_channels
            } else {
                self.width_at(level - 1)
            };
            let c = self.width_at(level);
            conv(format!("enc{}.conv1", level + 1), c, cin, 3);
            conv(format!("enc{}.conv2", level + 1), c, c, 3);
        }
        let c = self.width_at(d - 1);
        conv(format!("{BOTTLENECK}.conv1"), c, self.width_at(d - 2), 3);
        conv(format!("{BOTTLENECK}.conv2"), c, c, 3);
        for level in (0..d - 1).rev() {
            let c = self.width_at(level);
            conv(format!("dec{}.up", level + 1), c, self.width_at(level + 1), 3);
            conv(format!("dec{}.conv1", level + 1), c, 2 * c, 3);
            conv(format!("dec{}.conv2", level + 1), c, c, 3);
        }
        conv("head".to_string(), self.num_classes, self.width_at(0), 1);
        out
    }

    /// Capture point names in forward order.
    pub fn layer_names(&self) -> Vec<String> {
        let d = self.depth;
        let mut names: Vec<String> = (1..d).map(|n| format!("enc{n}.post")).collect();
        names.push(BOTTLENECK.to_string());
        names.extend((1..d).rev().map(|n| format!("dec{n}.post")));
        names
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UNetModel {
    config: UNetConfig,
    params: Vec<(String, Tensor)>,
}

impl UNetModel {
    /// Builds a model with He-normal kernels (`std = sqrt(2 / fan_in)`) and
    /// zero biases, drawn from a generator seeded by `config.seed`.
    pub fn new(config: UNetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let tensor = if shape.len() == 4 {
                    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
                    Tensor::from_fn(&shape, |_| normal.sample(&mut rng))
                } else {
                    Tensor::zeros(&shape)
                };
                (name, tensor)
            })
            .collect();
        Ok(UNetModel { config, params })
    }

    /// Assembles a model from explicit parameters, checking every shape.
    pub fn from_params(config: UNetConfig, params: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        check_params(&config, &params)?;
        Ok(UNetModel { config, params })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn forward(&self, image: &Tensor) -> Result<ForwardPass> {
        let cfg = &self.config;
        let (b, c, h, w) = image.dims4()?;
        if b != 1 {
            return Err(Error::shape("forward", "batch", format!("expected batch 1, got {b}")));
        }
        if c != cfg.in_channels {
            return Err(Error::shape(
                "forward",
                "in_channels",
                format!("model expects {} input channels, got {c}", cfg.in_channels),
            ));
        }
        let divisor = cfg.divisor();
        if h % divisor != 0 || w % divisor != 0 {
            return Err(Error::Resolution {
                height: h,
                width: w,
                divisor,
                levels: cfg.depth - 1,
            });
        }

        let mut tape = Tape::new();
        let input = tape.leaf(image.clone());
        let params: Vec<(String, NodeId)> = self
            .params
            .iter()
            .map(|(name, t)| (name.clone(), tape.leaf(t.clone())))
            .collect();
        let p = |name: &str| -> NodeId {
            params
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, id)| *id)
                .expect("parameter recorded")
        };
        let mut captures = Vec::new();
        let mut capture = |tape: &Tape, name: String, node: NodeId| {
            captures.push(CapturePoint {
                name,
                tensor: tape.value(node).expect("live node").clone(),
                node,
            });
        };
        let conv = |tape: &mut Tape, x: NodeId, name: &str, pad: usize| {
            tape.conv2d(x, p(&format!("{name}.weight")), p(&format!("{name}.bias")), pad, 1)
        };
        let block = |tape: &mut Tape, x: NodeId, prefix: &str| -> Result<NodeId> {
            let a = conv(tape, x, &format!("{prefix}.conv1"), 1)?;
            let a = tape.relu(a)?;
            let a = conv(tape, a, &format!("{prefix}.conv2"), 1)?;
            tape.relu(a)
        };

        let d = cfg.depth;
        let mut skips = Vec::with_capacity(d - 1);
        let mut x = input;
        for level in 0..d - 1 {
            let name = format!("enc{}", level + 1);
            let a = block(&mut tape, x, &name)?;
            capture(&tape, format!("{name}.post"), a);
            skips.push(a);
            x = tape.maxpool2d(a, 2)?;
        }
        x = block(&mut tape, x, BOTTLENECK)?;
        capture(&tape, BOTTLENECK.to_string(), x);
        for level in (0..d - 1).rev() {
            let name = format!("dec{}", level + 1);
            let up = tape.upsample_nearest(x, 2)?;
            let up = conv(&mut tape, up, &format!("{name}.up"), 1)?;
            let merged = tape.concat_channels(&[skips[level], up])?;
            x = block(&mut tape, merged, &name)?;
            capture(&tape, format!("{name}.post"), x);
        }
        let logits = conv(&mut tape, x, "head", 0)?;

        Ok(ForwardPass {
            tape,
            input,
            logits,
            captures,
            params,
        })
    }
}

impl Explainable for UNetModel {
    fn forward(&self, image: &Tensor) -> Result<ForwardPass> {
        UNetModel::forward(self, image)
    }

    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn layer_names(&self) -> Vec<String> {
        self.config.layer_names()
    }

    fn default_layer(&self) -> String {
        BOTTLENECK.to_string()
    }
}

fn check_params(config: &UNetConfig, params: &[(String, Tensor)]) -> Result<()> {
    let expected = config.param_shapes();
    for (i, (name, shape)) in expected.iter().enumerate() {
        match params.get(i) {
            Some((n, t)) if n == name && t.shape() == shape.as_slice() => {
                if !t.all_finite() {
                    return Err(Error::InvalidArgument(format!(
                        "parameter `{name}` has non-finite values"
                    )));
                }
            }
            Some((n, t)) => {
                return Err(Error::WeightShape {
                    name: n.clone(),
                    found: t.shape().to_vec(),
                    expected: shape.clone(),
                })
            }
            None => {
                return Err(Error::WeightShape {
                    name: name.clone(),
                    found: vec![],
                    expected: shape.clone(),
                })
            }
        }
    }
    if let Some((n, t)) = params.get(expected.len()) {
        return Err(Error::WeightShape {
            name: n.clone(),
            found: t.shape().to_vec(),
            expected: vec![],
        });
    }
    Ok(())
}
