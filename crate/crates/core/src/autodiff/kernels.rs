//! Batched forward/backward kernels on flat NCHW buffers.

use rayon::prelude::*;

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(cin: usize, h: usize, w: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || k == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        Some(Self {
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    pub fn in_len(&self) -> usize {
        self.cin * self.h * self.w
    }

    pub fn out_len(&self) -> usize {
        self.cout * self.out_plane()
    }

    /// 1x1, stride 1, no padding: the input already is its own column matrix.
    pub fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let plane = g.out_plane();
    for ci in 0..g.cin {
        let xc = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let plane = g.out_plane();
    for ci in 0..g.cin {
        let dxc = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dxc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Returns the output and, unless the convolution is pointwise, the per-sample
/// column matrices needed by the backward pass.
pub(crate) fn conv_forward<T: Scalar>(
    x: &[T],
    weight: &[T],
    bias: &[T],
    g: &ConvGeom,
    batch: usize,
) -> (Vec<T>, Vec<T>) {
    let kk = g.col_rows();
    let plane = g.out_plane();
    let mut out = vec![T::zero(); batch * g.out_len()];
    let mut cols = if g.pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); batch * kk * plane]
    };
    let run = |yn: &mut [T], col: &[T]| {
        for (co, row) in yn.chunks_exact_mut(plane).enumerate() {
            row.iter_mut().for_each(|v| *v = bias[co]);
        }
        T::gemm(
            g.cout,
            kk,
            plane,
            T::one(),
            weight,
            kk as isize,
            1,
            col,
            plane as isize,
            1,
            T::one(),
            yn,
            plane as isize,
            1,
        );
    };
    if g.pointwise() {
        out.par_chunks_mut(g.out_len())
            .zip(x.par_chunks(g.in_len()))
            .for_each(|(yn, xn)| run(yn, xn));
    } else {
        out.par_chunks_mut(g.out_len())
            .zip(cols.par_chunks_mut(kk * plane))
            .zip(x.par_chunks(g.in_len()))
            .for_each(|((yn, col), xn)| {
                im2col(xn, g, col);
                run(yn, col);
            });
    }
    (out, cols)
}

/// Accumulates weight and bias gradients (when `param_grads` is given) and
/// returns the input gradient (when `want_dx`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Scalar>(
    dy: &[T],
    x: &[T],
    cols: &[T],
    weight: &[T],
    g: &ConvGeom,
    batch: usize,
    param_grads: Option<(&mut [T], &mut [T])>,
    want_dx: bool,
) -> Option<Vec<T>> {
    let kk = g.col_rows();
    let plane = g.out_plane();
    if let Some((dw, db)) = param_grads {
        for n in 0..batch {
            let dyn_ = &dy[n * g.out_len()..(n + 1) * g.out_len()];
            let col = if g.pointwise() {
                &x[n * g.in_len()..(n + 1) * g.in_len()]
            } else {
                &cols[n * kk * plane..(n + 1) * kk * plane]
            };
            T::gemm(
                g.cout,
                plane,
                kk,
                T::one(),
                dyn_,
                plane as isize,
                1,
                col,
                1,
                plane as isize,
                T::one(),
                dw,
                kk as isize,
                1,
            );
            for (co, row) in dyn_.chunks_exact(plane).enumerate() {
                db[co] += row.iter().copied().sum::<T>();
            }
        }
    }
    if !want_dx {
        return None;
    }
    let mut dx = vec![T::zero(); batch * g.in_len()];
    dx.par_chunks_mut(g.in_len())
        .zip(dy.par_chunks(g.out_len()))
        .for_each(|(dxn, dyn_)| {
            if g.pointwise() {
                T::gemm(
                    kk,
                    g.cout,
                    plane,
                    T::one(),
                    weight,
                    1,
                    kk as isize,
                    dyn_,
                    plane as isize,
                    1,
                    T::zero(),
                    dxn,
                    plane as isize,
                    1,
                );
            } else {
                let mut dcol = vec![T::zero(); kk * plane];
                T::gemm(
                    kk,
                    g.cout,
                    plane,
                    T::one(),
                    weight,
                    1,
                    kk as isize,
                    dyn_,
                    plane as isize,
                    1,
                    T::zero(),
                    &mut dcol,
                    plane as isize,
                    1,
                );
                col2im(&dcol, g, dxn);
            }
        });
    Some(dx)
}

/// `y = x W^T + b` for `x: [batch, fin]`, `W: [fout, fin]`.
pub(crate) fn linear_forward<T: Scalar>(
    x: &[T],
    weight: &[T],
    bias: &[T],
    batch: usize,
    fin: usize,
    fout: usize,
) -> Vec<T> {
    let mut y = Vec::with_capacity(batch * fout);
    for _ in 0..batch {
        y.extend_from_slice(bias);
    }
    T::gemm(
        batch,
        fin,
        fout,
        T::one(),
        x,
        fin as isize,
        1,
        weight,
        1,
        fin as isize,
        T::one(),
        &mut y,
        fout as isize,
        1,
    );
    y
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_backward<T: Scalar>(
    dy: &[T],
    x: &[T],
    weight: &[T],
    batch: usize,
    fin: usize,
    fout: usize,
    param_grads: Option<(&mut [T], &mut [T])>,
    want_dx: bool,
) -> Option<Vec<T>> {
    if let Some((dw, db)) = param_grads {
        T::gemm(
            fout,
            batch,
            fin,
            T::one(),
            dy,
            1,
            fout as isize,
            x,
            fin as isize,
            1,
            T::one(),
            dw,
            fin as isize,
            1,
        );
        for row in dy.chunks_exact(fout) {
            for (b, d) in db.iter_mut().zip(row) {
                *b += *d;
            }
        }
    }
    if !want_dx {
        return None;
    }
    let mut dx = vec![T::zero(); batch * fin];
    T::gemm(
        batch,
        fout,
        fin,
        T::one(),
        dy,
        fout as isize,
        1,
        weight,
        fin as isize,
        1,
        T::zero(),
        &mut dx,
        fin as isize,
        1,
    );
    Some(dx)
}

/// 2x2 stride-2 max pooling over `planes` planes of `h x w`; returns the
/// output and the flat input index of every selected element. Ties pick the
/// first element in row-major window order.
pub(crate) fn max_pool_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> (Vec<T>, Vec<u32>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut arg = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

pub(crate) fn upsample_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * ho * wo];
    for p in 0..planes {
        for oy in 0..ho {
            for ox in 0..wo {
                out[p * ho * wo + oy * wo + ox] = x[p * h * w + (oy / 2) * w + ox / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample_backward<T: Scalar>(dy: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for y in 0..h {
            for x in 0..w {
                let o = p * ho * wo + 2 * y * wo + 2 * x;
                dx[p * h * w + y * w + x] = dy[o] + dy[o + 1] + dy[o + wo] + dy[o + wo + 1];
            }
        }
    }
    dx
}

pub(crate) fn softmax_rows<T: Scalar>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(cols) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        let mut sum = T::zero();
        for v in row {
            let e = (*v - m).exp();
            sum += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|e| *e /= sum);
    }
    out
}

pub(crate) fn softmax_backward<T: Scalar>(p: &[T], dy: &[T], cols: usize) -> Vec<T> {
    let mut dx = Vec::with_capacity(p.len());
    for (pr, gr) in p.chunks_exact(cols).zip(dy.chunks_exact(cols)) {
        let dot: T = pr.iter().zip(gr).map(|(a, b)| *a * *b).sum();
        dx.extend(pr.iter().zip(gr).map(|(a, b)| *a * (*b - dot)));
    }
    dx
}
