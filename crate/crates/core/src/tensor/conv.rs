//! Strided 2-D convolution and its adjoint (transpose convolution), lowered
//! to matrix products through im2col / col2im.
//!
//! Weights are always stored as `A × B × kh × kw`. [`conv2d_forward`] maps
//! `B` channels to `A`; [`transpose_conv2d_forward`] with the same buffer maps
//! `A` channels back to `B` and is the exact adjoint of the former.

use serde::{Deserialize, Serialize};

use super::{gemm, Element, Mat, Shape4, Tensor4};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

/// Geometry of a forward convolution from an `in_h × in_w` plane to an
/// `out_h × out_w` plane. A transpose convolution uses the geometry of the
/// forward convolution it is the adjoint of.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

fn axis(input: usize, k: usize, s: usize, padding: Padding) -> Option<(usize, usize)> {
    match padding {
        Padding::Same => {
            let out = input.div_ceil(s);
            let total = ((out - 1) * s + k).saturating_sub(input);
            Some((out, total / 2))
        }
        Padding::Valid => (input >= k).then(|| ((input - k) / s + 1, 0)),
    }
}

impl ConvGeometry {
    pub fn forward(
        in_h: usize,
        in_w: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<Self> {
        let (kh, kw) = kernel;
        let (sh, sw) = stride;
        if kh == 0 || kw == 0 || sh == 0 || sw == 0 {
            return Err(Error::InvalidArgument(format!(
                "kernel {kh}×{kw} and stride {sh}×{sw} must be ≥ 1"
            )));
        }
        let too_small = || {
            Error::shape(
                "conv2d",
                format!("input {in_h}×{in_w} smaller than kernel {kh}×{kw} under valid padding"),
            )
        };
        let (out_h, pad_top) = axis(in_h, kh, sh, padding).ok_or_else(too_small)?;
        let (out_w, pad_left) = axis(in_w, kw, sw, padding).ok_or_else(too_small)?;
        Ok(ConvGeometry {
            kh,
            kw,
            sh,
            sw,
            pad_top,
            pad_left,
            in_h,
            in_w,
            out_h,
            out_w,
        })
    }

    /// Geometry for a transpose convolution reading an `h × w` plane.
    /// Under same padding the output is `h·s × w·s`.
    pub fn transpose(
        h: usize,
        w: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<Self> {
        let (kh, kw) = kernel;
        let (sh, sw) = stride;
        let (big_h, big_w) = match padding {
            Padding::Same => (h * sh, w * sw),
            Padding::Valid => ((h - 1) * sh + kh, (w - 1) * sw + kw),
        };
        let g = Self::forward(big_h, big_w, kernel, stride, padding)?;
        debug_assert_eq!((g.out_h, g.out_w), (h, w));
        Ok(g)
    }

    pub fn kernel_area(&self) -> usize {
        self.kh * self.kw
    }

    pub fn in_len(&self) -> usize {
        self.in_h * self.in_w
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Range of output columns `ox` for which `ox·sw + kx − pad_left` lands
    /// inside the input row.
    #[inline]
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let lo = if kx >= self.pad_left {
            0
        } else {
            (self.pad_left - kx).div_ceil(self.sw)
        };
        // ix = ox·sw + kx − pad_left < in_w
        let limit = self.in_w + self.pad_left;
        let hi = if limit > kx {
            ((limit - kx - 1) / self.sw + 1).min(self.out_w)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    #[inline]
    fn input_row(&self, oy: usize, ky: usize) -> Option<usize> {
        (oy * self.sh + ky)
            .checked_sub(self.pad_top)
            .filter(|&iy| iy < self.in_h)
    }
}

/// Unfolds one `channels × in_h × in_w` sample into a
/// `(channels·kh·kw) × (out_h·out_w)` matrix.
pub fn im2col<T: Element>(x: &[T], channels: usize, g: &ConvGeometry, cols: &mut [T]) {
    let out_len = g.out_len();
    debug_assert_eq!(x.len(), channels * g.in_len());
    debug_assert_eq!(cols.len(), channels * g.kernel_area() * out_len);
    for c in 0..channels {
        let plane = &x[c * g.in_len()..(c + 1) * g.in_len()];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * out_len..(row + 1) * out_len];
                let (lo, hi) = g.valid_cols(kx);
                for oy in 0..g.out_h {
                    let seg = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    match g.input_row(oy, ky) {
                        None => seg.fill(T::zero()),
                        Some(iy) => {
                            seg[..lo].fill(T::zero());
                            seg[hi..].fill(T::zero());
                            let src = &plane[iy * g.in_w..(iy + 1) * g.in_w];
                            if hi > lo {
                                let ix0 = lo * g.sw + kx - g.pad_left;
                                if g.sw == 1 {
                                    seg[lo..hi].copy_from_slice(&src[ix0..ix0 + hi - lo]);
                                } else {
                                    for (k, v) in seg[lo..hi].iter_mut().enumerate() {
                                        *v = src[ix0 + k * g.sw];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds a column matrix back into `x`.
pub fn col2im<T: Element>(cols: &[T], channels: usize, g: &ConvGeometry, x: &mut [T]) {
    let out_len = g.out_len();
    debug_assert_eq!(x.len(), channels * g.in_len());
    for c in 0..channels {
        let plane = &mut x[c * g.in_len()..(c + 1) * g.in_len()];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * out_len..(row + 1) * out_len];
                let (lo, hi) = g.valid_cols(kx);
                if hi <= lo {
                    continue;
                }
                for oy in 0..g.out_h {
                    let Some(iy) = g.input_row(oy, ky) else { continue };
                    let seg = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    let dst = &mut plane[iy * g.in_w..(iy + 1) * g.in_w];
                    let ix0 = lo * g.sw + kx - g.pad_left;
                    for (k, &v) in seg[lo..hi].iter().enumerate() {
                        dst[ix0 + k * g.sw] = dst[ix0 + k * g.sw] + v;
                    }
                }
            }
        }
    }
}

fn check_bias<T: Element>(op: &'static str, bias: Option<&Tensor4<T>>, channels: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape().len() != channels {
            return Err(Error::shape(
                op,
                format!("bias has {} values, expected {channels}", b.shape().len()),
            ));
        }
    }
    Ok(())
}

fn add_bias<T: Element>(y: &mut [T], bias: &[T], plane: usize) {
    for (chunk, &b) in y.chunks_mut(plane).zip(bias) {
        for v in chunk {
            *v = *v + b;
        }
    }
}

/// Forward convolution. `w` is `out × in × kh × kw`.
pub fn conv2d_forward<T: Element>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    bias: Option<&Tensor4<T>>,
    stride: (usize, usize),
    padding: Padding,
) -> Result<(Tensor4<T>, ConvGeometry)> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.c != ws.c {
        return Err(Error::shape(
            "conv2d",
            format!("input has {} channels but kernel {ws} expects {}", xs.c, ws.c),
        ));
    }
    check_bias("conv2d", bias, ws.n)?;
    let g = ConvGeometry::forward(xs.h, xs.w, (ws.h, ws.w), stride, padding)?;
    let k = xs.c * g.kernel_area();
    let out_shape = Shape4::new(xs.n, ws.n, g.out_h, g.out_w);
    let mut y = Tensor4::zeros(out_shape);
    let mut cols = vec![T::zero(); k * g.out_len()];
    for n in 0..xs.n {
        im2col(x.sample(n), xs.c, &g, &mut cols);
        let out = y.sample_mut(n);
        gemm(
            T::one(),
            Mat::new(w.data(), ws.n, k),
            Mat::new(&cols, k, g.out_len()),
            T::zero(),
            out,
        );
        if let Some(b) = bias {
            add_bias(out, b.data(), g.out_len());
        }
    }
    Ok((y, g))
}

/// Gradients of [`conv2d_forward`]. Accumulates into the provided buffers.
pub(crate) fn conv2d_backward<T: Element>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    g: &ConvGeometry,
    dy: &Tensor4<T>,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let xs = x.shape();
    let ws = w.shape();
    let k = xs.c * g.kernel_area();
    let l = g.out_len();
    let mut cols = vec![T::zero(); k * l];
    for n in 0..xs.n {
        let dy_n = dy.sample(n);
        if let Some(dw) = dw.as_deref_mut() {
            im2col(x.sample(n), xs.c, g, &mut cols);
            gemm(
                T::one(),
                Mat::new(dy_n, ws.n, l),
                Mat::new(&cols, k, l).t(),
                T::one(),
                dw,
            );
        }
        if let Some(db) = db.as_deref_mut() {
            for (b, chunk) in db.iter_mut().zip(dy_n.chunks(l)) {
                *b = *b + chunk.iter().fold(T::zero(), |acc, &v| acc + v);
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            gemm(
                T::one(),
                Mat::new(w.data(), ws.n, k).t(),
                Mat::new(dy_n, ws.n, l),
                T::zero(),
                &mut cols,
            );
            let len = xs.sample_len();
            col2im(&cols, xs.c, g, &mut dx[n * len..(n + 1) * len]);
        }
    }
}

/// Transpose convolution. `w` is `in × out × kh × kw` (the layout of the
/// forward convolution this is the adjoint of).
pub fn transpose_conv2d_forward<T: Element>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    bias: Option<&Tensor4<T>>,
    stride: (usize, usize),
    padding: Padding,
) -> Result<(Tensor4<T>, ConvGeometry)> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.c != ws.n {
        return Err(Error::shape(
            "transpose_conv2d",
            format!("input has {} channels but kernel {ws} expects {}", xs.c, ws.n),
        ));
    }
    check_bias("transpose_conv2d", bias, ws.c)?;
    let g = ConvGeometry::transpose(xs.h, xs.w, (ws.h, ws.w), stride, padding)?;
    let k = ws.c * g.kernel_area();
    let l = g.out_len();
    let out_shape = Shape4::new(xs.n, ws.c, g.in_h, g.in_w);
    let mut y = Tensor4::zeros(out_shape);
    let mut cols = vec![T::zero(); k * l];
    for n in 0..xs.n {
        gemm(
            T::one(),
            Mat::new(w.data(), ws.n, k).t(),
            Mat::new(x.sample(n), xs.c, l),
            T::zero(),
            &mut cols,
        );
        let out = y.sample_mut(n);
        col2im(&cols, ws.c, &g, out);
        if let Some(b) = bias {
            add_bias(out, b.data(), g.in_len());
        }
    }
    Ok((y, g))
}

pub(crate) fn transpose_conv2d_backward<T: Element>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    g: &ConvGeometry,
    dy: &Tensor4<T>,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let xs = x.shape();
    let ws = w.shape();
    let k = ws.c * g.kernel_area();
    let l = g.out_len();
    let mut cols = vec![T::zero(); k * l];
    for n in 0..xs.n {
        let dy_n = dy.sample(n);
        if let Some(db) = db.as_deref_mut() {
            for (b, chunk) in db.iter_mut().zip(dy_n.chunks(g.in_len())) {
                *b = *b + chunk.iter().fold(T::zero(), |acc, &v| acc + v);
            }
        }
        if dx.is_none() && dw.is_none() {
            continue;
        }
        im2col(dy_n, ws.c, g, &mut cols);
        if let Some(dx) = dx.as_deref_mut() {
            let len = xs.sample_len();
            gemm(
                T::one(),
                Mat::new(w.data(), ws.n, k),
                Mat::new(&cols, k, l),
                T::one(),
                &mut dx[n * len..(n + 1) * len],
            );
        }
        if let Some(dw) = dw.as_deref_mut() {
            gemm(
                T::one(),
                Mat::new(x.sample(n), xs.c, l),
                Mat::new(&cols, k, l).t(),
                T::one(),
                dw,
            );
        }
    }
}

/// Weights and bias of one convolution layer plus its stride and padding.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T> {
    /// `out × in × kh × kw` for forward convolutions; `in × out × kh × kw`
    /// for transpose convolutions.
    pub weight: Tensor4<T>,
    /// `1 × channels × 1 × 1`.
    pub bias: Tensor4<T>,
    pub stride: (usize, usize),
    pub padding: Padding,
}

impl<T: Element> ConvParams<T> {
    pub fn zeros(weight_shape: Shape4, bias_channels: usize, stride: (usize, usize), padding: Padding) -> Self {
        ConvParams {
            weight: Tensor4::zeros(weight_shape),
            bias: Tensor4::zeros(Shape4::new(1, bias_channels, 1, 1)),
            stride,
            padding,
        }
    }

    pub fn kernel(&self) -> (usize, usize) {
        let s = self.weight.shape();
        (s.h, s.w)
    }

    pub fn conv2d(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        conv2d_forward(x, &self.weight, Some(&self.bias), self.stride, self.padding).map(|(y, _)| y)
    }

    pub fn transpose_conv2d(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        transpose_conv2d_forward(x, &self.weight, Some(&self.bias), self.stride, self.padding).map(|(y, _)| y)
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.shape().len() + self.bias.shape().len()
    }
}
