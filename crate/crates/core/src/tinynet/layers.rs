//! Forward and backward kernels. Feature maps are `[C, H, W]` row-major.

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::matrix::Matrix;

use super::tensor::Tensor;

/// Square convolution, stride 1, zero "same" padding (odd kernel sizes).
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (c, h, w) = input.chw()?;
    let (o, k) = conv_dims(weight, c)?;
    let pad = (k / 2) as isize;
    let x = input.data();
    let wt = weight.data();
    let mut out = vec![0.0; o * h * w];
    for oc in 0..o {
        let plane = &mut out[oc * h * w..(oc + 1) * h * w];
        plane.iter_mut().for_each(|v| *v = bias.data()[oc]);
        for ic in 0..c {
            let src = &x[ic * h * w..(ic + 1) * h * w];
            for ky in 0..k {
                let dy = ky as isize - pad;
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let wv = wt[((oc * c + ic) * k + ky) * k + kx];
                    let (y0, y1) = valid_range(h, dy);
                    let (x0, x1) = valid_range(w, dx);
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let dst = &mut plane[y * w + x0..y * w + x1];
                        let s = &src[sy * w + (x0 as isize + dx) as usize..];
                        for (d, &v) in dst.iter_mut().zip(s) {
                            *d += wv * v;
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[o, h, w], out)
}

pub struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn conv2d_backward(input: &Tensor, weight: &Tensor, grad_out: &[f64], need_input: bool) -> Result<ConvGrads> {
    let (c, h, w) = input.chw()?;
    let (o, k) = conv_dims(weight, c)?;
    if grad_out.len() != o * h * w {
        return Err(Error::ShapeMismatch("conv output gradient".into()));
    }
    let pad = (k / 2) as isize;
    let x = input.data();
    let wt = weight.data();
    let mut gw = vec![0.0; wt.len()];
    let mut gb = vec![0.0; o];
    let mut gx = need_input.then(|| vec![0.0; x.len()]);
    for oc in 0..o {
        let g = &grad_out[oc * h * w..(oc + 1) * h * w];
        gb[oc] = g.iter().sum();
        for ic in 0..c {
            let src = &x[ic * h * w..(ic + 1) * h * w];
            for ky in 0..k {
                let dy = ky as isize - pad;
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let widx = ((oc * c + ic) * k + ky) * k + kx;
                    let wv = wt[widx];
                    let (y0, y1) = valid_range(h, dy);
                    let (x0, x1) = valid_range(w, dx);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let go = &g[y * w + x0..y * w + x1];
                        let off = sy * w + (x0 as isize + dx) as usize;
                        let s = &src[off..off + (x1 - x0)];
                        acc += go.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
                        if let Some(gx) = gx.as_mut() {
                            let dst = &mut gx[ic * h * w + off..ic * h * w + off + (x1 - x0)];
                            for (d, &v) in dst.iter_mut().zip(go) {
                                *d += wv * v;
                            }
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    Ok(ConvGrads {
        input: gx,
        weight: gw,
        bias: gb,
    })
}

fn conv_dims(weight: &Tensor, in_channels: usize) -> Result<(usize, usize)> {
    match weight.shape() {
        &[o, c, k, k2] if c == in_channels && k == k2 && k % 2 == 1 => Ok((o, k)),
        s => Err(Error::ShapeMismatch(format!(
            "conv weight {s:?} incompatible with {in_channels} input channels"
        ))),
    }
}

/// Output positions `y` for which `y + d` is inside `[0, n)`.
#[inline]
fn valid_range(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d.max(0)).max(0) as usize;
    (lo.min(hi), hi)
}

pub fn relu_inplace(x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zeroes gradient entries where the ReLU output was not positive.
pub fn relu_backward(output: &[f64], grad: &mut [f64]) {
    for (g, &y) in grad.iter_mut().zip(output) {
        if y <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2x2 max-pool with stride 2; returns the pooled map and flat argmax
/// positions into the input (first maximum wins).
pub fn maxpool2(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (c, h, w) = input.chw()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::ShapeMismatch(format!("max-pool input {h}x{w} is not even")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = base + 2 * y * w + 2 * xx;
                for cand in [
                    best + 1,
                    base + (2 * y + 1) * w + 2 * xx,
                    base + (2 * y + 1) * w + 2 * xx + 1,
                ] {
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::from_vec(&[c, oh, ow], out)?, arg))
}

/// Routes pooled gradients back to their argmax positions.
pub fn scatter_backward(input_len: usize, argmax: &[usize], grad_out: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; input_len];
    for (&i, &v) in argmax.iter().zip(grad_out) {
        g[i] += v;
    }
    g
}

/// `y = x W^T + b` for a batch of rows; `weight` is `[out, in]`.
pub fn linear(x: &Matrix, weight: &Tensor, bias: &Tensor) -> Result<Matrix> {
    let (o, i) = linear_dims(weight)?;
    if x.cols() != i {
        return Err(Error::ShapeMismatch(format!(
            "linear layer expects {i} inputs, got {}",
            x.cols()
        )));
    }
    let w = weight.data();
    let mut y = Matrix::zeros(x.rows(), o);
    for r in 0..x.rows() {
        let xr = x.row(r);
        for (j, out) in y.row_mut(r).iter_mut().enumerate() {
            let wr = &w[j * i..(j + 1) * i];
            *out = bias.data()[j] + wr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    Ok(y)
}

pub struct LinearGrads {
    pub input: Matrix,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn linear_backward(x: &Matrix, weight: &Tensor, grad_out: &Matrix) -> Result<LinearGrads> {
    let (o, i) = linear_dims(weight)?;
    if grad_out.cols() != o || grad_out.rows() != x.rows() {
        return Err(Error::ShapeMismatch("linear output gradient".into()));
    }
    let w = weight.data();
    let mut gx = Matrix::zeros(x.rows(), i);
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; o];
    for r in 0..x.rows() {
        let xr = x.row(r);
        let gr = grad_out.row(r);
        let gxr = gx.row_mut(r);
        for (j, &g) in gr.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            gb[j] += g;
            let wr = &w[j * i..(j + 1) * i];
            let gwr = &mut gw[j * i..(j + 1) * i];
            for ((gwv, gxv), (&wv, &xv)) in gwr.iter_mut().zip(gxr.iter_mut()).zip(wr.iter().zip(xr)) {
                *gwv += g * xv;
                *gxv += g * wv;
            }
        }
    }
    Ok(LinearGrads {
        input: gx,
        weight: gw,
        bias: gb,
    })
}

fn linear_dims(weight: &Tensor) -> Result<(usize, usize)> {
    match weight.shape() {
        &[o, i] => Ok((o, i)),
        s => Err(Error::ShapeMismatch(format!("linear weight must be rank 2, got {s:?}"))),
    }
}

/// Max RoI pooling.
///
/// `roi` is in feature-map coordinates. It is snapped outward to whole cells
/// (`floor` of the near edges, `ceil` of the far edges) and clipped to the
/// map; the covered cells are split into `output_size x output_size` bins
/// with `floor`/`ceil` bin edges so every bin holds at least one cell.
/// Returns the `[C, P, P]` output and flat argmax positions into the map.
pub fn roi_pool(feature_map: &Tensor, roi: &BBox, output_size: usize) -> Result<(Tensor, Vec<usize>)> {
    let (c, h, w) = feature_map.chw()?;
    if output_size == 0 {
        return Err(Error::InvalidArgument("RoI output size must be positive".into()));
    }
    let x0 = (roi.x1.floor().max(0.0) as usize).min(w);
    let y0 = (roi.y1.floor().max(0.0) as usize).min(h);
    let x1 = (roi.x2.ceil().max(0.0) as usize).min(w);
    let y1 = (roi.y2.ceil().max(0.0) as usize).min(h);
    if !roi.is_valid() || roi.area() <= 0.0 || x1 <= x0 || y1 <= y0 {
        return Err(Error::DegenerateBox(format!("RoI {roi:?} has no area on a {w}x{h} map")));
    }
    let (rw, rh) = (x1 - x0, y1 - y0);
    let p = output_size;
    let data = feature_map.data();
    let mut out = Vec::with_capacity(c * p * p);
    let mut arg = Vec::with_capacity(c * p * p);
    for ch in 0..c {
        let base = ch * h * w;
        for by in 0..p {
            let ys = y0 + by * rh / p;
            let ye = y0 + ((by + 1) * rh).div_ceil(p);
            for bx in 0..p {
                let xs = x0 + bx * rw / p;
                let xe = x0 + ((bx + 1) * rw).div_ceil(p);
                let mut best = base + ys * w + xs;
                for y in ys..ye {
                    for x in xs..xe {
                        let idx = base + y * w + x;
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                }
                out.push(data[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::from_vec(&[c, p, p], out)?, arg))
}
