//! Convolution and resampling kernels on NCHW buffers.

use crate::tensor::{gemm, Layout, Real};

/// Geometry of one 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `ox` whose input column `ox*stride + kx - pad` is inside
/// the image, as a half-open range.
fn valid_columns(g: &ConvGeom, kx: usize, wo: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kx).div_ceil(g.stride);
    let hi = if g.width + g.pad > kx {
        ((g.width + g.pad - kx - 1) / g.stride + 1).min(wo)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let plane = ho * wo;
    let mut row = 0;
    for c in 0..g.in_channels {
        let xc = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let (lo, hi) = valid_columns(g, kx, wo);
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.height as isize || lo >= hi {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * g.width..(iy as usize + 1) * g.width];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    let first = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        let src = &src[first..first + (hi - lo - 1) * g.stride + 1];
                        for (j, v) in line[lo..hi].iter_mut().enumerate() {
                            *v = src[j * g.stride];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im_add<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let plane = ho * wo;
    let mut row = 0;
    for c in 0..g.in_channels {
        let dxc = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let (lo, hi) = valid_columns(g, kx, wo);
                let src = &cols[row * plane..(row + 1) * plane];
                row += 1;
                if lo >= hi {
                    continue;
                }
                let first = lo * g.stride + kx - g.pad;
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let line = &mut dxc[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let s = &src[oy * wo + lo..oy * wo + hi];
                    if g.stride == 1 {
                        for (d, v) in line[first..first + s.len()].iter_mut().zip(s) {
                            *d += *v;
                        }
                    } else {
                        let line = &mut line[first..first + (s.len() - 1) * g.stride + 1];
                        for (j, v) in s.iter().enumerate() {
                            line[j * g.stride] += *v;
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution of a batch. `weight` is `[O, C, k, k]`.
pub fn conv2d_forward<T: Real>(
    x: &[T],
    batch: usize,
    g: &ConvGeom,
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let plane = ho * wo;
    let in_len = g.in_channels * g.height * g.width;
    let out_len = g.out_channels * plane;
    let mut out = vec![T::zero(); batch * out_len];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.patch() * plane]
    };
    for n in 0..batch {
        let xn = &x[n * in_len..(n + 1) * in_len];
        let on = &mut out[n * out_len..(n + 1) * out_len];
        if let Some(b) = bias {
            for (o, &bo) in b.iter().enumerate() {
                on[o * plane..(o + 1) * plane].fill(bo);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        let rhs: &[T] = if g.is_pointwise() {
            xn
        } else {
            im2col(xn, g, &mut cols);
            &cols
        };
        gemm(
            g.out_channels,
            g.patch(),
            plane,
            T::one(),
            weight,
            Layout::Normal,
            rhs,
            Layout::Normal,
            beta,
            on,
        );
    }
    out
}

/// Gradients of a batched convolution. Each output is only computed when
/// requested.
pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Real>(
    x: &[T],
    batch: usize,
    g: &ConvGeom,
    weight: &[T],
    dout: &[T],
    want_dx: bool,
    want_dw: bool,
    want_db: bool,
) -> ConvGrads<T> {
    let plane = g.out_height() * g.out_width();
    let in_len = g.in_channels * g.height * g.width;
    let out_len = g.out_channels * plane;
    let patch = g.patch();
    let mut dx = want_dx.then(|| vec![T::zero(); batch * in_len]);
    let mut dw = want_dw.then(|| vec![T::zero(); g.out_channels * patch]);
    let mut db = want_db.then(|| vec![T::zero(); g.out_channels]);
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { patch * plane }];
    let mut dcols = vec![T::zero(); if want_dx && !g.is_pointwise() { patch * plane } else { 0 }];
    for n in 0..batch {
        let dn = &dout[n * out_len..(n + 1) * out_len];
        if let Some(db) = db.as_mut() {
            for (o, acc) in db.iter_mut().enumerate() {
                *acc += dn[o * plane..(o + 1) * plane].iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            let xn = &x[n * in_len..(n + 1) * in_len];
            let rhs: &[T] = if g.is_pointwise() {
                xn
            } else {
                im2col(xn, g, &mut cols);
                &cols
            };
            gemm(
                g.out_channels,
                plane,
                patch,
                T::one(),
                dn,
                Layout::Normal,
                rhs,
                Layout::Transposed,
                T::one(),
                dw,
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * in_len..(n + 1) * in_len];
            if g.is_pointwise() {
                gemm(
                    patch,
                    g.out_channels,
                    plane,
                    T::one(),
                    weight,
                    Layout::Transposed,
                    dn,
                    Layout::Normal,
                    T::zero(),
                    dxn,
                );
            } else {
                gemm(
                    patch,
                    g.out_channels,
                    plane,
                    T::one(),
                    weight,
                    Layout::Transposed,
                    dn,
                    Layout::Normal,
                    T::zero(),
                    &mut dcols,
                );
                col2im_add(&dcols, g, dxn);
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// Nearest-neighbour 2x upsampling of `[N*C, H, W]` planes.
pub fn upsample2<T: Real>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * h2 * w2];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
        for y in 0..h2 {
            let row = &src[(y / 2) * w..(y / 2 + 1) * w];
            for (xx, v) in dst[y * w2..(y + 1) * w2].iter_mut().enumerate() {
                *v = row[xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Real>(dout: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &dout[p * h2 * w2..(p + 1) * h2 * w2];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[(y / 2) * w + xx / 2] += src[y * w2 + xx];
            }
        }
    }
    dx
}

/// 2x2 average pooling with stride 2 (H, W even).
pub fn avgpool2<T: Real>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut out = vec![T::zero(); planes * h2 * w2];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
        for y in 0..h2 {
            for xx in 0..w2 {
                let s = src[2 * y * w + 2 * xx]
                    + src[2 * y * w + 2 * xx + 1]
                    + src[(2 * y + 1) * w + 2 * xx]
                    + src[(2 * y + 1) * w + 2 * xx + 1];
                dst[y * w2 + xx] = s * quarter;
            }
        }
    }
    out
}

pub fn avgpool2_backward<T: Real>(dout: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &dout[p * h2 * w2..(p + 1) * h2 * w2];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = src[(y / 2) * w2 + xx / 2] * quarter;
            }
        }
    }
    dx
}
