use super::Tensor;
use crate::error::{invalid, Result};

#[derive(Clone, Debug)]
pub struct ReluCache {
    mask: Vec<bool>,
    shape: Vec<usize>,
}

pub fn relu_forward(input: &Tensor) -> (Tensor, ReluCache) {
    let mask: Vec<bool> = input.data().iter().map(|&v| v > 0.0).collect();
    let data = input
        .data()
        .iter()
        .map(|&v| if v > 0.0 { v } else { 0.0 })
        .collect();
    let out = Tensor::new(input.shape().to_vec(), data).expect("shape preserved");
    (
        out,
        ReluCache {
            mask,
            shape: input.shape().to_vec(),
        },
    )
}

pub fn relu_backward(grad_out: &Tensor, cache: &ReluCache) -> Result<Tensor> {
    if grad_out.shape() != cache.shape.as_slice() {
        return Err(invalid("relu grad shape does not match forward"));
    }
    let data = grad_out
        .data()
        .iter()
        .zip(&cache.mask)
        .map(|(&g, &m)| if m { g } else { 0.0 })
        .collect();
    Tensor::new(cache.shape.clone(), data)
}

#[derive(Clone, Debug)]
pub struct PoolCache {
    input_shape: [usize; 4],
    /// Flat input index of the selected maximum, per output element.
    argmax: Vec<usize>,
}

/// 2×2 max pooling with stride 2. Ties resolve to the first maximum in
/// row-major order.
pub fn maxpool2x2_forward(input: &Tensor) -> Result<(Tensor, PoolCache)> {
    let (n, c, h, w) = input.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(invalid(format!(
            "max pooling needs even sides, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok((
        Tensor::new(vec![n, c, oh, ow], out)?,
        PoolCache {
            input_shape: [n, c, h, w],
            argmax,
        },
    ))
}

pub fn maxpool2x2_backward(grad_out: &Tensor, cache: &PoolCache) -> Result<Tensor> {
    if grad_out.len() != cache.argmax.len() {
        return Err(invalid("pool grad shape does not match forward"));
    }
    let [n, c, h, w] = cache.input_shape;
    let mut gin = vec![0.0f32; n * c * h * w];
    for (&idx, &g) in cache.argmax.iter().zip(grad_out.data()) {
        gin[idx] += g;
    }
    Tensor::new(cache.input_shape.to_vec(), gin)
}

#[derive(Clone, Debug)]
pub struct GapCache {
    input_shape: [usize; 4],
}

/// Per-channel spatial mean: `[N, C, H, W]` → `[N, C]`.
pub fn global_avg_pool_forward(input: &Tensor) -> Result<(Tensor, GapCache)> {
    let (n, c, h, w) = input.dims4()?;
    let hw = h * w;
    let out = input
        .data()
        .chunks_exact(hw)
        .map(|plane| plane.iter().sum::<f32>() / hw as f32)
        .collect();
    Ok((
        Tensor::new(vec![n, c], out)?,
        GapCache {
            input_shape: [n, c, h, w],
        },
    ))
}

pub fn global_avg_pool_backward(grad_out: &Tensor, cache: &GapCache) -> Result<Tensor> {
    let [n, c, h, w] = cache.input_shape;
    if grad_out.shape() != [n, c] {
        return Err(invalid("pooled grad shape does not match forward"));
    }
    let hw = h * w;
    let scale = 1.0 / hw as f32;
    let mut gin = Vec::with_capacity(n * c * hw);
    for &g in grad_out.data() {
        gin.extend(std::iter::repeat_n(g * scale, hw));
    }
    Tensor::new(cache.input_shape.to_vec(), gin)
}

#[derive(Clone, Debug)]
pub struct LinearCache {
    input: Tensor,
}

#[derive(Clone, Debug)]
pub struct LinearGrads {
    pub weight: Tensor,
    pub bias: Vec<f32>,
    pub input: Tensor,
}

/// `y = x Wᵀ + b` for `x: [N, D]`, `W: [O, D]`, `b: [O]`.
pub fn linear_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &[f32],
) -> Result<(Tensor, LinearCache)> {
    let (n, d) = input.dims2()?;
    let (o, wd) = weight.dims2()?;
    if wd != d || bias.len() != o {
        return Err(invalid(format!(
            "linear layer [{o}, {wd}] with {} biases cannot take input width {d}",
            bias.len()
        )));
    }
    let mut out = Vec::with_capacity(n * o);
    for i in 0..n {
        let x = input.row(i);
        for j in 0..o {
            let acc: f32 = weight.row(j).iter().zip(x).map(|(a, b)| a * b).sum();
            out.push(acc + bias[j]);
        }
    }
    Ok((
        Tensor::new(vec![n, o], out)?,
        LinearCache {
            input: input.clone(),
        },
    ))
}

pub fn linear_backward(
    grad_out: &Tensor,
    weight: &Tensor,
    cache: &LinearCache,
) -> Result<LinearGrads> {
    let (n, d) = cache.input.dims2()?;
    let (o, wd) = weight.dims2()?;
    if wd != d || grad_out.shape() != [n, o] {
        return Err(invalid("linear grad shape does not match forward"));
    }
    let mut gw = vec![0.0f32; o * d];
    let mut gb = vec![0.0f32; o];
    let mut gx = vec![0.0f32; n * d];
    for i in 0..n {
        let x = cache.input.row(i);
        for j in 0..o {
            let g = grad_out.data()[i * o + j];
            gb[j] += g;
            let wrow = weight.row(j);
            for k in 0..d {
                gw[j * d + k] += g * x[k];
                gx[i * d + k] += g * wrow[k];
            }
        }
    }
    Ok(LinearGrads {
        weight: Tensor::new(vec![o, d], gw)?,
        bias: gb,
        input: Tensor::new(vec![n, d], gx)?,
    })
}
