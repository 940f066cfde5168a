//! Raw numeric kernels on flat row-major buffers. The tape records calls to
//! these and the CAM pipeline reuses the spatial ones on plain maps.

/// Geometry of one 2-D convolution over a single batch item.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub padding: usize,
    pub stride: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_plane(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// Unfolds one input item `[cin, h, w]` into `[cin*kh*kw, oh*ow]`.
fn im2col(g: &ConvGeometry, input: &[f64], cols: &mut [f64]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let plane = oh * ow;
    for ci in 0..g.in_channels {
        let src = &input[ci * g.height * g.width..(ci + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (ci * g.kernel_h + ki) * g.kernel_w + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oi in 0..oh {
                    let y = (oi * g.stride + ki) as isize - g.padding as isize;
                    let out_row = &mut dst[oi * ow..(oi + 1) * ow];
                    if y < 0 || y >= g.height as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src_row = &src[y as usize * g.width..(y as usize + 1) * g.width];
                    for (oj, v) in out_row.iter_mut().enumerate() {
                        let x = (oj * g.stride + kj) as isize - g.padding as isize;
                        *v = if x < 0 || x >= g.width as isize {
                            0.0
                        } else {
                            src_row[x as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Folds `[cin*kh*kw, oh*ow]` columns back onto `[cin, h, w]`, accumulating.
fn col2im_add(g: &ConvGeometry, cols: &[f64], out: &mut [f64]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let plane = oh * ow;
    for ci in 0..g.in_channels {
        let dst = &mut out[ci * g.height * g.width..(ci + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (ci * g.kernel_h + ki) * g.kernel_w + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oi in 0..oh {
                    let y = (oi * g.stride + ki) as isize - g.padding as isize;
                    if y < 0 || y >= g.height as isize {
                        continue;
                    }
                    let dst_row = &mut dst[y as usize * g.width..(y as usize + 1) * g.width];
                    for oj in 0..ow {
                        let x = (oj * g.stride + kj) as isize - g.padding as isize;
                        if x >= 0 && x < g.width as isize {
                            dst_row[x as usize] += src[oi * ow + oj];
                        }
                    }
                }
            }
        }
    }
}

/// `c = a * b + beta * c` for row-major `a: [m,k]`, `b: [k,n]`, with optional
/// transposition of either operand.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address exactly the m*k, k*n and m*n elements
    // of the slices, whose lengths are checked in debug builds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Cross-correlation of `[batch, cin, h, w]` with `[cout, cin, kh, kw]`.
pub fn conv2d_forward(
    g: &ConvGeometry,
    batch: usize,
    input: &[f64],
    kernel: &[f64],
    bias: &[f64],
) -> Vec<f64> {
    let plane = g.out_plane();
    let in_item = g.in_channels * g.height * g.width;
    let out_item = g.out_channels * plane;
    let mut out = vec![0.0; batch * out_item];
    let mut cols = vec![0.0; g.patch_len() * plane];
    for b in 0..batch {
        im2col(g, &input[b * in_item..(b + 1) * in_item], &mut cols);
        let dst = &mut out[b * out_item..(b + 1) * out_item];
        for (co, &bv) in bias.iter().enumerate() {
            dst[co * plane..(co + 1) * plane].fill(bv);
        }
        gemm(
            g.out_channels,
            g.patch_len(),
            plane,
            kernel,
            false,
            &cols,
            false,
            1.0,
            dst,
        );
    }
    out
}

/// Gradients of a convolution. Each output buffer is only computed when
/// requested; results are accumulated into the provided buffers.
pub struct ConvGrads<'a> {
    pub input: Option<&'a mut [f64]>,
    pub kernel: Option<&'a mut [f64]>,
    pub bias: Option<&'a mut [f64]>,
}

pub fn conv2d_backward(
    g: &ConvGeometry,
    batch: usize,
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    mut grads: ConvGrads<'_>,
) {
    let plane = g.out_plane();
    let in_item = g.in_channels * g.height * g.width;
    let out_item = g.out_channels * plane;
    let patch = g.patch_len();
    let mut cols = vec![0.0; patch * plane];
    for b in 0..batch {
        let go = &grad_out[b * out_item..(b + 1) * out_item];
        if let Some(gb) = grads.bias.as_deref_mut() {
            for (co, acc) in gb.iter_mut().enumerate() {
                *acc += go[co * plane..(co + 1) * plane].iter().sum::<f64>();
            }
        }
        if let Some(gk) = grads.kernel.as_deref_mut() {
            im2col(g, &input[b * in_item..(b + 1) * in_item], &mut cols);
            gemm(g.out_channels, plane, patch, go, false, &cols, true, 1.0, gk);
        }
        if let Some(gi) = grads.input.as_deref_mut() {
            gemm(patch, g.out_channels, plane, kernel, true, go, false, 0.0, &mut cols);
            col2im_add(g, &cols, &mut gi[b * in_item..(b + 1) * in_item]);
        }
    }
}

/// Source coordinate and interpolation weight of an align-corners resize.
fn align_corners_source(out_index: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    if out_len == 1 || in_len == 1 {
        return (0, 0, 0.0);
    }
    let pos = (out_index * (in_len - 1)) as f64 / (out_len - 1) as f64;
    let lo = (pos.floor() as usize).min(in_len - 1);
    let hi = (lo + 1).min(in_len - 1);
    (lo, hi, pos - lo as f64)
}

/// Align-corners bilinear resize of `planes` stacked `[h, w]` maps.
pub fn bilinear_forward(
    planes: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
    input: &[f64],
) -> Vec<f64> {
    let mut out = vec![0.0; planes * out_h * out_w];
    let cols: Vec<_> = (0..out_w).map(|j| align_corners_source(j, w, out_w)).collect();
    for p in 0..planes {
        let src = &input[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
        for i in 0..out_h {
            let (y0, y1, wy) = align_corners_source(i, h, out_h);
            for (j, &(x0, x1, wx)) in cols.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - wx) + src[y0 * w + x1] * wx;
                let bottom = src[y1 * w + x0] * (1.0 - wx) + src[y1 * w + x1] * wx;
                dst[i * out_w + j] = top * (1.0 - wy) + bottom * wy;
            }
        }
    }
    out
}

pub fn bilinear_backward(
    planes: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
    grad_out: &[f64],
    grad_in: &mut [f64],
) {
    let cols: Vec<_> = (0..out_w).map(|j| align_corners_source(j, w, out_w)).collect();
    for p in 0..planes {
        let go = &grad_out[p * out_h * out_w..(p + 1) * out_h * out_w];
        let gi = &mut grad_in[p * h * w..(p + 1) * h * w];
        for i in 0..out_h {
            let (y0, y1, wy) = align_corners_source(i, h, out_h);
            for (j, &(x0, x1, wx)) in cols.iter().enumerate() {
                let g = go[i * out_w + j];
                gi[y0 * w + x0] += g * (1.0 - wy) * (1.0 - wx);
                gi[y0 * w + x1] += g * (1.0 - wy) * wx;
                gi[y1 * w + x0] += g * wy * (1.0 - wx);
                gi[y1 * w + x1] += g * wy * wx;
            }
        }
    }
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn nearest_forward(planes: usize, h: usize, w: usize, factor: usize, input: &[f64]) -> Vec<f64> {
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        for i in 0..oh {
            for j in 0..ow {
                out[(p * oh + i) * ow + j] = input[(p * h + i / factor) * w + j / factor];
            }
        }
    }
    out
}

pub fn nearest_backward(
    planes: usize,
    h: usize,
    w: usize,
    factor: usize,
    grad_out: &[f64],
    grad_in: &mut [f64],
) {
    let (oh, ow) = (h * factor, w * factor);
    for p in 0..planes {
        for i in 0..oh {
            for j in 0..ow {
                grad_in[(p * h + i / factor) * w + j / factor] += grad_out[(p * oh + i) * ow + j];
            }
        }
    }
}

/// Max pooling with square `window` and stride equal to the window. Windows
/// at the right and bottom edges may be partial (ceil mode). Returns the
/// pooled values and, per output, the flat input index of the maximum; ties
/// go to the first element in row-major order.
pub fn maxpool_forward(
    planes: usize,
    h: usize,
    w: usize,
    window: usize,
    input: &[f64],
) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h.div_ceil(window), w.div_ceil(window));
    let mut values = Vec::with_capacity(planes * oh * ow);
    let mut argmax = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        for oi in 0..oh {
            for oj in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for i in oi * window..((oi + 1) * window).min(h) {
                    for j in oj * window..((oj + 1) * window).min(w) {
                        let idx = (p * h + i) * w + j;
                        if best_idx == usize::MAX || input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                values.push(best);
                argmax.push(best_idx);
            }
        }
    }
    (values, argmax)
}
