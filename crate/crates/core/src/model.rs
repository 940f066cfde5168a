//! What the CAM pipeline needs from a network: a recorded forward pass with
//! named activation capture points.

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// A named activation recorded during a forward pass.
#[derive(Clone, Debug)]
pub struct CapturePoint {
    pub name: String,
    pub tensor: Tensor,
    pub node: NodeId,
}

impl CapturePoint {
    /// Spatial extent `(h, w)` of the captured activation.
    pub fn spatial(&self) -> (usize, usize) {
        let s = self.tensor.shape();
        (s[2], s[3])
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[1]
    }
}

/// Everything recorded by one forward pass.
#[derive(Debug)]
pub struct ForwardPass {
    pub tape: Tape,
    pub input: NodeId,
    pub logits: NodeId,
    pub captures: Vec<CapturePoint>,
    /// Parameter leaves by name, in model order.
    pub params: Vec<(String, NodeId)>,
}

impl ForwardPass {
    pub fn logits(&self) -> &Tensor {
        self.tape.value(self.logits).expect("logits node is live")
    }

    pub fn capture(&self, name: &str) -> Result<&CapturePoint> {
        self.captures
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| Error::UnknownLayer {
                name: name.to_string(),
                valid: self
                    .captures
                    .iter()
                    .map(|c| c.name.as_str())
                    .collect::<Vec<_>>()
                    .join(", "),
            })
    }
}

/// A network whose activations can be explained.
pub trait Explainable {
    fn forward(&self, image: &Tensor) -> Result<ForwardPass>;

    fn num_classes(&self) -> usize;

    /// Capture point names in forward order.
    fn layer_names(&self) -> Vec<String>;

    /// The deepest capture point.
    fn default_layer(&self) -> String;

    /// Fully connected weights of `class` when the network ends in global
    /// average pooling over [`Explainable::default_layer`] followed by a
    /// fully connected layer; `None` for any other head.
    fn gap_fc_weights(&self, _class: usize) -> Option<Result<Vec<f64>>> {
        None
    }
}
