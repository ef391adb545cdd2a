//! Pure forward kernels.
//!
//! These are the numerically careful scalar/array routines that the
//! differentiable ops wrap. Summations run in fixed index order so forward
//! evaluation is bit-deterministic.

use crate::error::{Error, Result};

use super::real::{lit, Real};
use super::tensor::Tensor;

/// Numerically stable softmax: shift by the maximum, exponentiate, normalize.
/// Safe for logits up to ±1e4 in magnitude.
pub fn stable_softmax<T: Real>(logits: &[T]) -> Result<Vec<T>> {
    if logits.is_empty() {
        return Err(Error::numeric("stable_softmax on empty vector"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite logit in stable_softmax"));
    }
    let mut max = logits[0];
    for &v in &logits[1..] {
        if v > max {
            max = v;
        }
    }
    let mut out: Vec<T> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: T = out.iter().fold(T::zero(), |acc, &v| acc + v);
    for v in &mut out {
        *v = *v / sum;
    }
    Ok(out)
}

/// log(σ(x)) without underflow: −softplus(−x) with the stable softplus split.
pub fn stable_log_sigmoid<T: Real>(x: T) -> T {
    // softplus(z) = ln(1 + e^z); for z = −x:
    //   x ≥ 0:  logσ(x) = −ln(1 + e^(−x))
    //   x < 0:  logσ(x) = x − ln(1 + e^(x))
    if x >= T::zero() {
        -(T::one() + (-x).exp()).ln()
    } else {
        x - (T::one() + x.exp()).ln()
    }
}

/// σ(x) computed through the stable log form.
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Output spatial side for a convolution/pooling along one axis.
pub fn conv_out_len(len: usize, k: usize, stride: usize, padding: usize) -> usize {
    (len + 2 * padding - k) / stride + 1
}

/// Plain conv2d on a (C_in,H,W) map with an (C_out,C_in,k,k) kernel.
/// Kernel side must be odd and the stride 1 or 2.
pub fn conv2d<T: Real>(
    map: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (c_in, h, w) = dims3(map)?;
    let ks = kernel.shape();
    if ks.len() != 4 || ks[1] != c_in || ks[2] != ks[3] {
        return Err(Error::shape(format!(
            "kernel shape {ks:?} incompatible with input channels {c_in}"
        )));
    }
    let (c_out, k) = (ks[0], ks[2]);
    if k % 2 == 0 {
        return Err(Error::shape(format!("kernel side {k} must be odd")));
    }
    if stride != 1 && stride != 2 {
        return Err(Error::shape(format!("stride {stride} unsupported (must be 1 or 2)")));
    }
    if k > h + 2 * padding || k > w + 2 * padding {
        return Err(Error::shape(format!(
            "kernel {k}×{k} larger than padded input {}×{}",
            h + 2 * padding,
            w + 2 * padding
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(Error::shape("conv bias must have one entry per output channel".to_string()));
        }
    }
    let ho = conv_out_len(h, k, stride, padding);
    let wo = conv_out_len(w, k, stride, padding);

    let cols = im2col(map.data(), c_in, h, w, k, stride, padding, ho, wo);
    let mut out = vec![T::zero(); c_out * ho * wo];
    super::linalg::mm_nn(kernel.data(), &cols, &mut out, c_out, c_in * k * k, ho * wo);
    if let Some(b) = bias {
        for (co, &bv) in b.data().iter().enumerate() {
            for v in &mut out[co * ho * wo..(co + 1) * ho * wo] {
                *v = *v + bv;
            }
        }
    }
    Ok(Tensor::raw(vec![c_out, ho, wo], out))
}

/// Unfold a (C,H,W) map into a (C·k·k, Ho·Wo) patch matrix.
#[allow(clippy::too_many_arguments)]
pub(super) fn im2col<T: Real>(
    data: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let mut cols = vec![T::zero(); c * k * k * ho * wo];
    let cols_w = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k * k + ky * k + kx) * cols_w;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = ci * h * w + iy as usize * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[row + oy * wo + ox] = data[src + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter a (C·k·k, Ho·Wo) patch matrix back onto a (C,H,W) map (adjoint of
/// `im2col`).
#[allow(clippy::too_many_arguments)]
pub(super) fn col2im<T: Real>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); c * h * w];
    let cols_w = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k * k + ky * k + kx) * cols_w;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = ci * h * w + iy as usize * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out[dst + ix as usize] = out[dst + ix as usize] + cols[row + oy * wo + ox];
                    }
                }
            }
        }
    }
    out
}

pub enum Resample {
    Up2,
    Down2,
}

/// Nearest-neighbor rescale of a (C,H,W) map by ×2 or ×½.
pub fn resample<T: Real>(map: &Tensor<T>, mode: Resample) -> Result<Tensor<T>> {
    let (c, h, w) = dims3(map)?;
    match mode {
        Resample::Up2 => {
            let (ho, wo) = (h * 2, w * 2);
            let mut out = vec![T::zero(); c * ho * wo];
            for ci in 0..c {
                for y in 0..ho {
                    for x in 0..wo {
                        out[ci * ho * wo + y * wo + x] = map.data()[ci * h * w + (y / 2) * w + x / 2];
                    }
                }
            }
            Ok(Tensor::raw(vec![c, ho, wo], out))
        }
        Resample::Down2 => {
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::shape(format!("downsample of odd dims {h}×{w}")));
            }
            let (ho, wo) = (h / 2, w / 2);
            let mut out = vec![T::zero(); c * ho * wo];
            for ci in 0..c {
                for y in 0..ho {
                    for x in 0..wo {
                        out[ci * ho * wo + y * wo + x] = map.data()[ci * h * w + (y * 2) * w + x * 2];
                    }
                }
            }
            Ok(Tensor::raw(vec![c, ho, wo], out))
        }
    }
}

/// Weights and corner indices for one bilinear sample on an H×W grid.
///
/// Convention: pixel (y, x) has its center at ((x+0.5)/W, (y+0.5)/H) in the
/// normalized [0,1]² coordinate frame, point = (u, v) = (horizontal,
/// vertical). Out-of-range points clamp to the border-pixel centers, where
/// the positional derivative is zero.
pub(super) struct BilinearTap {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
    pub wx: f64,
    pub wy: f64,
    /// d(wx)/du in grid units (0 when clamped), and likewise for v.
    pub dwx_du: f64,
    pub dwy_dv: f64,
}

pub(super) fn bilinear_tap(u: f64, v: f64, h: usize, w: usize) -> BilinearTap {
    let gx = u * w as f64 - 0.5;
    let gy = v * h as f64 - 0.5;
    let (x0, x1, wx, dwx) = axis_tap(gx, w);
    let (y0, y1, wy, dwy) = axis_tap(gy, h);
    BilinearTap { x0, x1, y0, y1, wx, wy, dwx_du: dwx * w as f64, dwy_dv: dwy * h as f64 }
}

fn axis_tap(g: f64, len: usize) -> (usize, usize, f64, f64) {
    if g <= 0.0 {
        (0, 0, 0.0, 0.0)
    } else if g >= (len - 1) as f64 {
        (len - 1, len - 1, 0.0, 0.0)
    } else {
        let i0 = g.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, g - i0 as f64, 1.0)
    }
}

/// Bilinear interpolation of a (H,W,C) map at normalized points (u,v) ∈ [0,1]².
pub fn bilinear_sample<T: Real>(map: &Tensor<T>, points: &[(f64, f64)]) -> Result<Tensor<T>> {
    let (h, w, c) = dims3(map)?;
    if h == 0 || w == 0 {
        return Err(Error::shape("bilinear_sample on empty map".to_string()));
    }
    let data = map.data();
    let mut out = vec![T::zero(); points.len() * c];
    for (pi, &(u, v)) in points.iter().enumerate() {
        let t = bilinear_tap(u, v, h, w);
        let w00 = lit::<T>((1.0 - t.wy) * (1.0 - t.wx));
        let w01 = lit::<T>((1.0 - t.wy) * t.wx);
        let w10 = lit::<T>(t.wy * (1.0 - t.wx));
        let w11 = lit::<T>(t.wy * t.wx);
        let r00 = (t.y0 * w + t.x0) * c;
        let r01 = (t.y0 * w + t.x1) * c;
        let r10 = (t.y1 * w + t.x0) * c;
        let r11 = (t.y1 * w + t.x1) * c;
        let dst = &mut out[pi * c..(pi + 1) * c];
        for ch in 0..c {
            dst[ch] = w00 * data[r00 + ch]
                + w01 * data[r01 + ch]
                + w10 * data[r10 + ch]
                + w11 * data[r11 + ch];
        }
    }
    Ok(Tensor::raw(vec![points.len(), c], out))
}

fn dims3<T: Real>(t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let s = t.shape();
    if s.len() != 3 {
        return Err(Error::shape(format!("expected 3-d tensor, got {s:?}")));
    }
    Ok((s[0], s[1], s[2]))
}
