use super::Tensor;
use crate::error::{invalid, Result};

/// Shape bookkeeping saved by [`conv2d_forward`].
#[derive(Clone, Debug)]
pub struct ConvCache {
    input_shape: [usize; 4],
    filter_shape: [usize; 4],
    stride: usize,
    pad_top: usize,
    pad_left: usize,
    out_h: usize,
    out_w: usize,
}

/// Same-style padding: returns `(output_len, pad_before)` for one axis so the
/// output length is `ceil(len / stride)`.
pub fn same_padding(len: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = len.div_ceil(stride);
    let needed = ((out - 1) * stride + kernel).saturating_sub(len);
    (out, needed / 2)
}

/// Cross-correlation of `[N, C, H, W]` with `[C', C, k, k]` filters.
pub fn conv2d_forward(
    input: &Tensor,
    filters: &Tensor,
    stride: usize,
) -> Result<(Tensor, ConvCache)> {
    let (n, c, h, w) = input.dims4()?;
    let (co, ci, kh, kw) = filters.dims4()?;
    if ci != c {
        return Err(invalid(format!(
            "filters expect {ci} input channels, input has {c}"
        )));
    }
    if kh != kw {
        return Err(invalid("filters must be square"));
    }
    if kh > h || kw > w {
        return Err(invalid(format!("kernel {kh} larger than input {h}x{w}")));
    }
    if stride == 0 {
        return Err(invalid("stride must be at least 1"));
    }
    let (oh, pt) = same_padding(h, kh, stride);
    let (ow, pl) = same_padding(w, kw, stride);

    let x = input.data();
    let f = filters.data();
    let ckk = c * kh * kw;
    let plane = oh * ow;
    let mut cols = vec![0.0f32; ckk * plane];
    let mut out = vec![0.0f32; n * co * plane];
    for b in 0..n {
        im2col(
            &x[b * c * h * w..(b + 1) * c * h * w],
            &mut cols,
            [c, h, w],
            [kh, kw],
            stride,
            [pt, pl],
            [oh, ow],
        );
        let dst = &mut out[b * co * plane..(b + 1) * co * plane];
        for (o, orow) in dst.chunks_exact_mut(plane).enumerate() {
            for (j, crow) in cols.chunks_exact(plane).enumerate() {
                let wt = f[o * ckk + j];
                if wt != 0.0 {
                    orow.iter_mut().zip(crow).for_each(|(d, &v)| *d += wt * v);
                }
            }
        }
    }
    let cache = ConvCache {
        input_shape: [n, c, h, w],
        filter_shape: [co, ci, kh, kw],
        stride,
        pad_top: pt,
        pad_left: pl,
        out_h: oh,
        out_w: ow,
    };
    Ok((Tensor::new(vec![n, co, oh, ow], out)?, cache))
}

/// Gradient of the loss with respect to the convolution input.
pub fn conv2d_backward_input(
    grad_out: &Tensor,
    filters: &Tensor,
    cache: &ConvCache,
) -> Result<Tensor> {
    let [n, c, h, w] = cache.input_shape;
    let [co, ci, kh, kw] = cache.filter_shape;
    if filters.shape() != cache.filter_shape {
        return Err(invalid("filters do not match the forward cache"));
    }
    if grad_out.shape() != [n, co, cache.out_h, cache.out_w] {
        return Err(invalid(format!(
            "grad_out shape {:?} does not match forward output",
            grad_out.shape()
        )));
    }
    let (oh, ow, stride) = (cache.out_h, cache.out_w, cache.stride);
    let (pt, pl) = (cache.pad_top, cache.pad_left);
    let g = grad_out.data();
    let f = filters.data();
    let ckk = ci * kh * kw;
    let plane = oh * ow;
    let mut gcols = vec![0.0f32; ckk * plane];
    let mut gin = vec![0.0f32; n * c * h * w];
    for b in 0..n {
        gcols.iter_mut().for_each(|v| *v = 0.0);
        let gsrc = &g[b * co * plane..(b + 1) * co * plane];
        for (o, grow) in gsrc.chunks_exact(plane).enumerate() {
            for (j, crow) in gcols.chunks_exact_mut(plane).enumerate() {
                let wt = f[o * ckk + j];
                crow.iter_mut().zip(grow).for_each(|(d, &v)| *d += wt * v);
            }
        }
        col2im(
            &gcols,
            &mut gin[b * c * h * w..(b + 1) * c * h * w],
            [c, h, w],
            [kh, kw],
            stride,
            [pt, pl],
            [oh, ow],
        );
    }
    Tensor::new(vec![n, c, h, w], gin)
}

/// Unrolls one `[C, H, W]` image into `[C·kh·kw, oh·ow]` patch rows.
fn im2col(
    x: &[f32],
    cols: &mut [f32],
    [c, h, w]: [usize; 3],
    [kh, kw]: [usize; 2],
    stride: usize,
    [pt, pl]: [usize; 2],
    [oh, ow]: [usize; 2],
) {
    for i in 0..c {
        let src = &x[i * h * w..(i + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &mut cols[((i * kh + ky) * kw + kx) * oh * ow..][..oh * ow];
                for oy in 0..oh {
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    let iy = oy * stride + ky;
                    if iy < pt || iy - pt >= h {
                        dst.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let srow = &src[(iy - pt) * w..(iy - pt + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = ox * stride + kx;
                        *d = if ix >= pl && ix - pl < w {
                            srow[ix - pl]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch-row gradients back onto the image.
fn col2im(
    cols: &[f32],
    g: &mut [f32],
    [c, h, w]: [usize; 3],
    [kh, kw]: [usize; 2],
    stride: usize,
    [pt, pl]: [usize; 2],
    [oh, ow]: [usize; 2],
) {
    for i in 0..c {
        let dst = &mut g[i * h * w..(i + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &cols[((i * kh + ky) * kw + kx) * oh * ow..][..oh * ow];
                for oy in 0..oh {
                    let iy = oy * stride + ky;
                    if iy < pt || iy - pt >= h {
                        continue;
                    }
                    let drow = &mut dst[(iy - pt) * w..(iy - pt + 1) * w];
                    for (ox, &v) in row[oy * ow..(oy + 1) * ow].iter().enumerate() {
                        let ix = ox * stride + kx;
                        if ix >= pl && ix - pl < w {
                            drow[ix - pl] += v;
                        }
                    }
                }
            }
        }
    }
}
