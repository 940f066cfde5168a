//! Class activation maps for segmentation and classification networks.
//!
//! A segmentation CAM explains the summed class-`c` score over a pixel set
//! `M` of the output mask. The gradient of that score with respect to a
//! captured activation `A` gives the channel weights: averaged per channel
//! for Seg-Grad CAM, used elementwise for Seg-HiRes-Grad CAM, and max-pooled
//! over a window for Seg-XRes-CAM. The weighted channel sum is upsampled to
//! the input resolution, before and after ReLU.

mod heatmap;
mod pixels;

pub use heatmap::{
    assemble_heatmap, grad_cam_weights, hires_weights, weighted_sum, xres_weights, Map2d,
    ReluOrder, Weights,
};
pub use pixels::{resolve_pixel_set, PixelSet, PixelSetSpec};

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::label::{predict_classes, LabelMap};
use crate::model::{CapturePoint, Explainable};
use crate::tape::{NodeId, ScalarTarget, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    /// Fully connected weights of a GAP+FC head.
    CamFc,
    GradCam,
    HiresCam,
    SegGradCam,
    SegHiresGradCam,
    SegXresCam,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::CamFc,
        Method::GradCam,
        Method::HiresCam,
        Method::SegGradCam,
        Method::SegHiresGradCam,
        Method::SegXresCam,
    ];

    /// Methods that explain a pixel set of a segmentation output.
    pub const SEGMENTATION: [Method; 3] =
        [Method::SegGradCam, Method::SegHiresGradCam, Method::SegXresCam];

    pub fn name(self) -> &'static str {
        match self {
            Method::CamFc => "cam_fc",
            Method::GradCam => "grad_cam",
            Method::HiresCam => "hires_cam",
            Method::SegGradCam => "seg_grad",
            Method::SegHiresGradCam => "seg_hires_grad",
            Method::SegXresCam => "seg_xres",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown method `{s}` (valid: {})",
                    Method::ALL.map(Method::name).join(", ")
                ))
            })
    }
}

/// Which per-pixel class score is differentiated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TargetKind {
    /// Pre-softmax scores.
    #[default]
    Logits,
    /// Softmax probabilities across classes.
    Probabilities,
}

impl fmt::Display for TargetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TargetKind::Logits => "logits",
            TargetKind::Probabilities => "probabilities",
        })
    }
}

impl FromStr for TargetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logits" => Ok(TargetKind::Logits),
            "probabilities" => Ok(TargetKind::Probabilities),
            other => Err(Error::InvalidArgument(format!(
                "unknown target `{other}` (expected logits or probabilities)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CamRequest {
    pub method: Method,
    pub class: usize,
    /// Capture point name; `None` selects the model's deepest layer.
    pub layer: Option<String>,
    pub pixels: PixelSetSpec,
    pub xres_window: usize,
    pub relu_order: ReluOrder,
    pub target: TargetKind,
}

impl CamRequest {
    pub fn new(method: Method, class: usize, pixels: PixelSetSpec) -> Self {
        CamRequest {
            method,
            class,
            layer: None,
            pixels,
            xres_window: 2,
            relu_order: ReluOrder::default(),
            target: TargetKind::default(),
        }
    }

    pub fn with_layer(mut self, layer: impl Into<String>) -> Self {
        self.layer = Some(layer.into());
        self
    }

    pub fn with_window(mut self, window: usize) -> Self {
        self.xres_window = window;
        self
    }

    pub fn with_relu_order(mut self, order: ReluOrder) -> Self {
        self.relu_order = order;
        self
    }

    pub fn with_target(mut self, target: TargetKind) -> Self {
        self.target = target;
        self
    }
}

/// The target layer is too coarse to localize anything.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResolutionWarning {
    pub layer: String,
    pub height: usize,
    pub width: usize,
}

impl fmt::Display for ResolutionWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "feature map of layer `{}` is only {}x{}; too much spatial detail is lost for a reliable CAM (use a larger input or a shallower layer)",
            self.layer, self.height, self.width
        )
    }
}

/// Feature maps whose smaller side is at most this many pixels trigger a warning.
pub const COLLAPSE_THRESHOLD: usize = 2;

/// Warns when the capture's smaller spatial side is at most 2.
pub fn check_resolution_collapse(capture: &CapturePoint) -> Option<ResolutionWarning> {
    let (h, w) = capture.spatial();
    (h.min(w) <= COLLAPSE_THRESHOLD).then(|| ResolutionWarning {
        layer: capture.name.clone(),
        height: h,
        width: w,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    /// Signed map at input resolution.
    pub pre_relu: Map2d,
    /// Non-negative map at input resolution.
    pub post_relu: Map2d,
    pub method: Method,
    pub layer: String,
    pub warning: Option<ResolutionWarning>,
}

/// `sum_{(i,j) in M} y^c_ij` recorded on `tape`. `logits` is
/// `[1, classes, h, w]` at the resolution of `pixels`; an empty set gives 0.
pub fn target_scalar(
    tape: &mut Tape,
    logits: NodeId,
    class: usize,
    pixels: &PixelSet,
    kind: TargetKind,
) -> Result<ScalarTarget> {
    let (b, classes, h, w) = tape.value(logits)?.dims4()?;
    if b != 1 {
        return Err(Error::shape("target_scalar", "batch", format!("expected 1, got {b}")));
    }
    if class >= classes {
        return Err(Error::ClassOutOfRange {
            class,
            num_classes: classes,
        });
    }
    if (h, w) != (pixels.height, pixels.width) {
        return Err(Error::shape(
            "target_scalar",
            "spatial",
            format!("logits {h}x{w}, pixel set {}x{}", pixels.height, pixels.width),
        ));
    }
    let scores = match kind {
        TargetKind::Logits => logits,
        TargetKind::Probabilities => tape.softmax_channels(logits)?,
    };
    let s = tape.sum_at(scores, pixels.flat_indices(class))?;
    tape.scalar_target(s)
}

/// Gradient of a pixel-set target at one capture point, shared by all
/// methods that explain the same request.
#[derive(Clone, Debug)]
pub struct LayerGradient {
    pub layer: String,
    pub activations: Tensor,
    pub gradient: Tensor,
    pub pixels: PixelSet,
    pub prediction: LabelMap,
    pub target: f64,
    pub input_size: (usize, usize),
    pub warning: Option<ResolutionWarning>,
}

impl LayerGradient {
    pub fn heatmap(&self, method: Method, window: usize, order: ReluOrder) -> Result<Heatmap> {
        let (h, w) = self.input_size;
        let (pre_relu, post_relu) = match method {
            Method::SegGradCam | Method::GradCam => {
                let alpha = grad_cam_weights(&self.gradient)?;
                assemble_heatmap(Weights::Scalar(&alpha), &self.activations, h, w, order)?
            }
            Method::SegHiresGradCam | Method::HiresCam => {
                let alpha = hires_weights(&self.gradient)?;
                assemble_heatmap(Weights::Map(&alpha), &self.activations, h, w, order)?
            }
            Method::SegXresCam => {
                let alpha = xres_weights(&self.gradient, window)?;
                assemble_heatmap(Weights::Map(&alpha), &self.activations, h, w, order)?
            }
            Method::CamFc => {
                return Err(Error::InvalidArgument(
                    "cam_fc takes its weights from the FC head, not from gradients".to_string(),
                ))
            }
        };
        Ok(Heatmap {
            pre_relu,
            post_relu,
            method,
            layer: self.layer.clone(),
            warning: self.warning.clone(),
        })
    }
}

fn layer_name<M: Explainable + ?Sized>(model: &M, layer: Option<&str>) -> Result<String> {
    let name = layer.map_or_else(|| model.default_layer(), str::to_string);
    let valid = model.layer_names();
    if !valid.contains(&name) {
        return Err(Error::UnknownLayer {
            name,
            valid: valid.join(", "),
        });
    }
    Ok(name)
}

/// Forward pass, pixel-set target and backward to `layer`.
pub fn layer_gradient<M: Explainable + ?Sized>(
    model: &M,
    image: &Tensor,
    class: usize,
    pixels: &PixelSetSpec,
    layer: Option<&str>,
    target: TargetKind,
) -> Result<LayerGradient> {
    if class >= model.num_classes() {
        return Err(Error::ClassOutOfRange {
            class,
            num_classes: model.num_classes(),
        });
    }
    let layer = layer_name(model, layer)?;
    let mut pass = model.forward(image)?;
    let prediction = predict_classes(pass.logits())?;
    let pixels = resolve_pixel_set(pixels, &prediction)?;
    let scalar = target_scalar(&mut pass.tape, pass.logits, class, &pixels, target)?;
    let capture = pass.capture(&layer)?.clone();
    let warning = check_resolution_collapse(&capture);
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    let mut grads = pass.tape.backward(scalar, &[capture.node])?;
    let (_, _, h, w) = image.dims4()?;
    Ok(LayerGradient {
        layer,
        gradient: grads.remove(&capture.node).expect("requested gradient"),
        activations: capture.tensor,
        pixels,
        prediction,
        target: scalar.value,
        input_size: (h, w),
        warning,
    })
}

fn seg_request<M: Explainable + ?Sized>(
    model: &M,
    image: &Tensor,
    request: &CamRequest,
    expected: Method,
) -> Result<Heatmap> {
    if request.method != expected {
        return Err(Error::InvalidArgument(format!(
            "request is for {}, not {expected}",
            request.method
        )));
    }
    layer_gradient(
        model,
        image,
        request.class,
        &request.pixels,
        request.layer.as_deref(),
        request.target,
    )?
    .heatmap(expected, request.xres_window, request.relu_order)
}

/// Seg-Grad CAM: spatially averaged gradients as channel weights.
pub fn seg_grad_cam<M: Explainable + ?Sized>(
    model: &M,
    image: &Tensor,
    request: &CamRequest,
) -> Result<Heatmap> {
    seg_request(model, image, request, Method::SegGradCam)
}

/// Seg-HiRes-Grad CAM: the raw gradient map multiplied elementwise.
pub fn seg_hires_grad_cam<M: Explainable + ?Sized>(
    model: &M,
    image: &Tensor,
    request: &CamRequest,
) -> Result<Heatmap> {
    seg_request(model, image, request, Method::SegHiresGradCam)
}

/// Seg-XRes-CAM: gradient map max-pooled over `xres_window` windows.
pub fn seg_xres_cam<M: Explainable + ?Sized>(
    model: &M,
    image: &Tensor,
    request: &CamRequest,
) -> Result<Heatmap> {
    if request.xres_window == 0 {
        return Err(Error::InvalidArgument("xres window must be >= 1".to_string()));
    }
    seg_request(model, image, request, Method::SegXresCam)
}

/// Classification Grad CAM or HiRes CAM: the class score is the single
/// logit of a `[1, classes, 1, 1]` output.
pub fn classification_cam<M: Explainable + ?Sized>(
    model: &M,
    image: &Tensor,
    class: usize,
    method: Method,
    layer: Option<&str>,
    order: ReluOrder,
) -> Result<Heatmap> {
    if !matches!(method, Method::GradCam | Method::HiresCam) {
        return Err(Error::InvalidArgument(format!(
            "{method} is not a classification gradient method"
        )));
    }
    if class >= model.num_classes() {
        return Err(Error::ClassOutOfRange {
            class,
            num_classes: model.num_classes(),
        });
    }
    let layer = layer_name(model, layer)?;
    let mut pass = model.forward(image)?;
    let (_, classes, h, w) = pass.logits().dims4()?;
    if (h, w) != (1, 1) {
        return Err(Error::shape(
            "classification_cam",
            "spatial",
            format!("classification logits must be 1x1, got {h}x{w}"),
        ));
    }
    debug_assert_eq!(classes, model.num_classes());
    let score = pass.tape.sum_at(pass.logits, vec![class])?;
    let score = pass.tape.scalar_target(score)?;
    let capture = pass.capture(&layer)?.clone();
    let warning = check_resolution_collapse(&capture);
    let mut grads = pass.tape.backward(score, &[capture.node])?;
    let (_, _, ih, iw) = image.dims4()?;
    let lg = LayerGradient {
        layer,
        gradient: grads.remove(&capture.node).expect("requested gradient"),
        activations: capture.tensor,
        pixels: PixelSet::from_points(1, 1, vec![(0, 0)])?,
        prediction: predict_classes(pass.logits())?,
        target: score.value,
        input_size: (ih, iw),
        warning,
    };
    lg.heatmap(method, 1, order)
}

/// Classic CAM: the channel weights are the FC weights of `class` in a
/// global-average-pool + fully-connected head.
pub fn cam_fc<M: Explainable + ?Sized>(
    model: &M,
    image: &Tensor,
    class: usize,
    order: ReluOrder,
) -> Result<Heatmap> {
    let alpha = model.gap_fc_weights(class).ok_or_else(|| {
        Error::InvalidArgument(
            "cam_fc needs a model ending in global average pooling and a fully connected layer"
                .to_string(),
        )
    })??;
    let layer = model.default_layer();
    let pass = model.forward(image)?;
    let capture = pass.capture(&layer)?;
    let (_, _, h, w) = image.dims4()?;
    let (pre_relu, post_relu) =
        assemble_heatmap(Weights::Scalar(&alpha), &capture.tensor, h, w, order)?;
    Ok(Heatmap {
        pre_relu,
        post_relu,
        method: Method::CamFc,
        layer,
        warning: check_resolution_collapse(capture),
    })
}

/// Dispatches `request` to the matching method.
pub fn explain<M: Explainable + ?Sized>(
    model: &M,
    image: &Tensor,
    request: &CamRequest,
) -> Result<Heatmap> {
    match request.method {
        Method::SegGradCam => seg_grad_cam(model, image, request),
        Method::SegHiresGradCam => seg_hires_grad_cam(model, image, request),
        Method::SegXresCam => seg_xres_cam(model, image, request),
        Method::GradCam | Method::HiresCam => classification_cam(
            model,
            image,
            request.class,
            request.method,
            request.layer.as_deref(),
            request.relu_order,
        ),
        Method::CamFc => cam_fc(model, image, request.class, request.relu_order),
    }
}
