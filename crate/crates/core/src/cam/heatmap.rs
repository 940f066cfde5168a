//! Channel weights and heatmap assembly.

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// A 2-D map of `f64`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Map2d {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Map2d {
    pub fn zeros(height: usize, width: usize) -> Self {
        Map2d {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.width + j]
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Row-major position of the first maximum.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (k, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = k;
            }
        }
        (best / self.width, best % self.width)
    }

    pub fn relu(&self) -> Map2d {
        Map2d {
            data: self.data.iter().map(|v| v.max(0.0)).collect(),
            ..*self
        }
    }

    /// Align-corners bilinear resize to `out_h` x `out_w`.
    pub fn upsample(&self, out_h: usize, out_w: usize) -> Result<Map2d> {
        if out_h < self.height || out_w < self.width {
            return Err(Error::shape(
                "upsample",
                if out_h < self.height { "height" } else { "width" },
                format!("cannot downscale {}x{} to {out_h}x{out_w}", self.height, self.width),
            ));
        }
        Ok(Map2d {
            height: out_h,
            width: out_w,
            data: kernels::bilinear_forward(1, self.height, self.width, out_h, out_w, &self.data),
        })
    }
}

impl std::ops::Add for &Map2d {
    type Output = Map2d;

    fn add(self, rhs: &Map2d) -> Map2d {
        assert_eq!((self.height, self.width), (rhs.height, rhs.width));
        Map2d {
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect(),
            ..*self
        }
    }
}

/// `[K, h, w]` extents of a gradient or activation tensor given as
/// `[1, K, h, w]` or `[K, h, w]`.
fn khw(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [1, k, h, w] | [k, h, w] => Ok((k, h, w)),
        _ => Err(Error::shape(
            op,
            "rank",
            format!("expected [K,h,w] or [1,K,h,w], got {:?}", t.shape()),
        )),
    }
}

/// Per-channel spatial mean of the gradient: `alpha_k = (1/N) sum_uv dy/dA^k_uv`.
pub fn grad_cam_weights(grad: &Tensor) -> Result<Vec<f64>> {
    let (k, h, w) = khw("grad_cam_weights", grad)?;
    let n = (h * w) as f64;
    Ok((0..k)
        .map(|c| grad.data()[c * h * w..(c + 1) * h * w].iter().sum::<f64>() / n)
        .collect())
}

/// The raw gradient map used as an elementwise weight.
pub fn hires_weights(grad: &Tensor) -> Result<Tensor> {
    khw("hires_weights", grad)?;
    Tensor::new(grad.shape().to_vec(), grad.data().to_vec())
}

/// Gradient map max-pooled with a `window` x `window` stride-`window` grid
/// (partial windows at the edges) and spread back over each window.
pub fn xres_weights(grad: &Tensor, window: usize) -> Result<Tensor> {
    let (k, h, w) = khw("xres_weights", grad)?;
    if window == 0 {
        return Err(Error::InvalidArgument("xres window must be >= 1".to_string()));
    }
    if window > h || window > w {
        return Err(Error::InvalidArgument(format!(
            "xres window {window} exceeds the {h}x{w} feature map"
        )));
    }
    let (pooled, _) = kernels::maxpool_forward(k, h, w, window, grad.data());
    let (ph, pw) = (h.div_ceil(window), w.div_ceil(window));
    let mut out = vec![0.0; k * h * w];
    for c in 0..k {
        for i in 0..h {
            for j in 0..w {
                out[(c * h + i) * w + j] = pooled[(c * ph + i / window) * pw + j / window];
            }
        }
    }
    Tensor::new(grad.shape().to_vec(), out)
}

/// Channel weights: one scalar per channel, or a full map per channel.
#[derive(Clone, Copy, Debug)]
pub enum Weights<'a> {
    Scalar(&'a [f64]),
    Map(&'a Tensor),
}

/// Order of ReLU and upsampling for the post-ReLU map.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ReluOrder {
    #[default]
    ReluThenUpsample,
    UpsampleThenRelu,
}

impl std::fmt::Display for ReluOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ReluOrder::ReluThenUpsample => "relu_then_upsample",
            ReluOrder::UpsampleThenRelu => "upsample_then_relu",
        })
    }
}

impl std::str::FromStr for ReluOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu_then_upsample" | "relu-first" => Ok(ReluOrder::ReluThenUpsample),
            "upsample_then_relu" | "upsample-first" => Ok(ReluOrder::UpsampleThenRelu),
            other => Err(Error::InvalidArgument(format!(
                "unknown relu order `{other}` (expected relu_then_upsample or upsample_then_relu)"
            ))),
        }
    }
}

/// Weighted channel sum at feature resolution, before ReLU.
pub fn weighted_sum(weights: Weights<'_>, activations: &Tensor) -> Result<Map2d> {
    const OP: &str = "assemble_heatmap";
    let (k, h, w) = khw(OP, activations)?;
    let a = activations.data();
    let plane = h * w;
    let mut sum = vec![0.0; plane];
    match weights {
        Weights::Scalar(alpha) => {
            if alpha.len() != k {
                return Err(Error::shape(
                    OP,
                    "channels",
                    format!("{} scalar weights for {k} channels", alpha.len()),
                ));
            }
            for (c, &wc) in alpha.iter().enumerate() {
                for (s, &v) in sum.iter_mut().zip(&a[c * plane..(c + 1) * plane]) {
                    *s += wc * v;
                }
            }
        }
        Weights::Map(alpha) => {
            if khw(OP, alpha)? != (k, h, w) {
                return Err(Error::shape(
                    OP,
                    "weight_map",
                    format!("weight map {:?} vs activations {:?}", alpha.shape(), activations.shape()),
                ));
            }
            let al = alpha.data();
            for c in 0..k {
                for p in 0..plane {
                    sum[p] += al[c * plane + p] * a[c * plane + p];
                }
            }
        }
    }
    Ok(Map2d {
        height: h,
        width: w,
        data: sum,
    })
}

/// Pre- and post-ReLU heatmaps at `out_h` x `out_w`.
pub fn assemble_heatmap(
    weights: Weights<'_>,
    activations: &Tensor,
    out_h: usize,
    out_w: usize,
    order: ReluOrder,
) -> Result<(Map2d, Map2d)> {
    let sum = weighted_sum(weights, activations)?;
    let pre = sum.upsample(out_h, out_w)?;
    let post = match order {
        ReluOrder::ReluThenUpsample => sum.relu().upsample(out_h, out_w)?,
        ReluOrder::UpsampleThenRelu => pre.relu(),
    };
    Ok((pre, post))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn constant_gradient_gives_that_weight() {
        let g = Tensor::from_fn(&[1, 2, 3, 3], |i| if i < 9 { 0.5 } else { -2.0 });
        assert_eq!(grad_cam_weights(&g).unwrap(), vec![0.5, -2.0]);
    }

    #[test]
    fn cancelling_gradient_gives_zero() {
        let g = t(&[1, 1, 2, 2], &[1.0, -1.0, 1.0, -1.0]);
        assert_eq!(grad_cam_weights(&g).unwrap(), vec![0.0]);
    }

    #[test]
    fn hires_is_identity() {
        let g = Tensor::from_fn(&[1, 3, 2, 2], |i| i as f64 - 5.0);
        assert_eq!(hires_weights(&g).unwrap(), g);
    }

    #[test]
    fn xres_window_one_and_full() {
        let g = Tensor::from_fn(&[1, 2, 4, 4], |i| ((i * 7) % 11) as f64 - 5.0);
        assert_eq!(xres_weights(&g, 1).unwrap(), g);
        let full = xres_weights(&g, 4).unwrap();
        for c in 0..2 {
            let plane = full.plane(0, c);
            let max = g.plane(0, c).into_iter().fold(f64::NEG_INFINITY, f64::max);
            assert!(plane.iter().all(|&v| v == max));
        }
        assert!(xres_weights(&g, 5).is_err());
        assert!(xres_weights(&g, 0).is_err());
    }

    #[test]
    fn zero_weights_zero_heatmap() {
        let a = Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64);
        let (pre, post) =
            assemble_heatmap(Weights::Scalar(&[0.0, 0.0]), &a, 4, 4, ReluOrder::default()).unwrap();
        assert!(pre.data.iter().chain(&post.data).all(|&v| v == 0.0));
    }

    #[test]
    fn unit_weight_single_channel_is_upsampled_relu() {
        let a = t(&[1, 1, 2, 2], &[1.0, -1.0, -1.0, 1.0]);
        let (_, post) =
            assemble_heatmap(Weights::Scalar(&[1.0]), &a, 3, 3, ReluOrder::ReluThenUpsample)
                .unwrap();
        let expected = Map2d {
            height: 2,
            width: 2,
            data: vec![1.0, 0.0, 0.0, 1.0],
        }
        .upsample(3, 3)
        .unwrap();
        assert_eq!(post, expected);
    }

    #[test]
    fn relu_orders_differ_only_post() {
        let a = t(&[1, 1, 1, 2], &[-1.0, 1.0]);
        let (pre1, post1) =
            assemble_heatmap(Weights::Scalar(&[1.0]), &a, 1, 3, ReluOrder::ReluThenUpsample)
                .unwrap();
        let (pre2, post2) =
            assemble_heatmap(Weights::Scalar(&[1.0]), &a, 1, 3, ReluOrder::UpsampleThenRelu)
                .unwrap();
        assert_eq!(pre1, pre2);
        assert_eq!(post1.data, vec![0.0, 0.5, 1.0]);
        assert_eq!(post2.data, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn mode_shape_mismatch() {
        let a = Tensor::zeros(&[1, 2, 2, 2]);
        assert!(weighted_sum(Weights::Scalar(&[1.0]), &a).is_err());
        let m = Tensor::zeros(&[1, 2, 2, 3]);
        assert!(weighted_sum(Weights::Map(&m), &a).is_err());
    }
}
