//! Raw numeric kernels over flat NCHW buffers.

use super::Scalar;

pub(crate) const KSIZE: usize = 3;
const PAD: isize = 1;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        let ho = (self.h + 2 * PAD as usize - KSIZE) / self.stride + 1;
        let wo = (self.w + 2 * PAD as usize - KSIZE) / self.stride + 1;
        (ho, wo)
    }

    fn patch(&self) -> usize {
        self.cin * KSIZE * KSIZE
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    let s = g.stride as isize;
    for ci in 0..g.cin {
        let xc = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..KSIZE {
            for kx in 0..KSIZE {
                let row = (ci * KSIZE + ky) * KSIZE + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = oy as isize * s + ky as isize - PAD;
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = ox as isize * s + kx as isize - PAD;
                        *o = if ix < 0 || ix >= g.w as isize {
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

fn col2im_add<T: Scalar>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    let s = g.stride as isize;
    for ci in 0..g.cin {
        let dxc = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..KSIZE {
            for kx in 0..KSIZE {
                let row = (ci * KSIZE + ky) * KSIZE + kx;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = oy as isize * s + ky as isize - PAD;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dxc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..wo {
                        let ix = ox as isize * s + kx as isize - PAD;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Zero-padded 3×3 cross-correlation, `weight` laid out `[cout, cin, 3, 3]`.
pub(crate) fn conv2d_forward<T: Scalar>(x: &[T], weight: &[T], bias: &[T], g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    let k = g.patch();
    let mut out = vec![T::zero(); g.n * g.cout * plane];
    let mut col = vec![T::zero(); k * plane];
    for b in 0..g.n {
        im2col(&x[b * g.cin * g.h * g.w..(b + 1) * g.cin * g.h * g.w], g, &mut col);
        let ob = &mut out[b * g.cout * plane..(b + 1) * g.cout * plane];
        for (co, chunk) in ob.chunks_mut(plane).enumerate() {
            chunk.fill(bias[co]);
        }
        T::gemm(
            g.cout,
            k,
            plane,
            T::one(),
            weight,
            k as isize,
            1,
            &col,
            plane as isize,
            1,
            T::one(),
            ob,
            plane as isize,
            1,
        );
    }
    out
}

/// Accumulates input, weight and bias gradients of [`conv2d_forward`].
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    g: &ConvGeom,
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    let k = g.patch();
    let in_sz = g.cin * g.h * g.w;
    let mut col = vec![T::zero(); k * plane];
    let mut dcol = vec![T::zero(); k * plane];
    let mut dx = dx;
    let mut dw = dw;
    if let Some(db) = db {
        for b in 0..g.n {
            for co in 0..g.cout {
                let off = (b * g.cout + co) * plane;
                db[co] += dy[off..off + plane].iter().copied().sum::<T>();
            }
        }
    }
    for b in 0..g.n {
        let dyb = &dy[b * g.cout * plane..(b + 1) * g.cout * plane];
        if let Some(dw) = dw.as_deref_mut() {
            im2col(&x[b * in_sz..(b + 1) * in_sz], g, &mut col);
            // dw[cout, k] += dy[cout, P] * col^T[P, k]
            T::gemm(
                g.cout,
                plane,
                k,
                T::one(),
                dyb,
                plane as isize,
                1,
                &col,
                1,
                plane as isize,
                T::one(),
                dw,
                k as isize,
                1,
            );
        }
        if let Some(dx) = dx.as_deref_mut() {
            // dcol[k, P] = W^T[k, cout] * dy[cout, P]
            T::gemm(
                k,
                g.cout,
                plane,
                T::one(),
                weight,
                1,
                k as isize,
                dyb,
                plane as isize,
                1,
                T::zero(),
                &mut dcol,
                plane as isize,
                1,
            );
            col2im_add(&dcol, g, &mut dx[b * in_sz..(b + 1) * in_sz]);
        }
    }
}

/// Nearest-neighbour 2× upsampling of `[planes, h, w]`.
pub(crate) fn upsample2x_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * h2 * w2];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
        for y in 0..h2 {
            let srow = &src[(y / 2) * w..(y / 2 + 1) * w];
            let drow = &mut dst[y * w2..(y + 1) * w2];
            for (xx, d) in drow.iter_mut().enumerate() {
                *d = srow[xx / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2x_backward<T: Scalar>(dy: &[T], planes: usize, h: usize, w: usize, dx: &mut [T]) {
    let (h2, w2) = (2 * h, 2 * w);
    for p in 0..planes {
        let src = &dy[p * h2 * w2..(p + 1) * h2 * w2];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..h2 {
            let srow = &src[y * w2..(y + 1) * w2];
            let drow = &mut dst[(y / 2) * w..(y / 2 + 1) * w];
            for (xx, &v) in srow.iter().enumerate() {
                drow[xx / 2] += v;
            }
        }
    }
}

/// `[m, k] x [k, n]`, row-major.
pub(crate) fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    T::gemm(m, k, n, T::one(), a, k as isize, 1, b, n as isize, 1, T::zero(), &mut out, n as isize, 1);
    out
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}
