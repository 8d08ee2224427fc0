//! Low-level dense kernels shared by the forward and backward passes.

use super::tensor::Scalar;

/// Strided view of a matrix inside a flat buffer.
#[derive(Clone, Copy, Debug)]
pub(crate) struct View {
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    pub fn rows(offset: usize, cols: usize) -> Self {
        Self {
            offset,
            rs: cols,
            cs: 1,
        }
    }

    /// Transposed view of a row-major block with `cols` columns.
    pub fn rows_t(offset: usize, cols: usize) -> Self {
        Self {
            offset,
            rs: 1,
            cs: cols,
        }
    }

    fn last_index(&self, r: usize, c: usize) -> usize {
        self.offset + (r.max(1) - 1) * self.rs + (c.max(1) - 1) * self.cs
    }
}

/// `c[m×n] = alpha * a[m×k] * b[k×n] + beta * c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    av: View,
    b: &[T],
    bv: View,
    beta: T,
    c: &mut [T],
    cv: View,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(av.last_index(m, k) < a.len() || k == 0, "gemm: a out of bounds");
    assert!(bv.last_index(k, n) < b.len() || k == 0, "gemm: b out of bounds");
    assert!(cv.last_index(m, n) < c.len(), "gemm: c out of bounds");
    // SAFETY: bounds of every accessed element checked above; `c` does not alias
    // `a` or `b` because it is borrowed mutably.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(av.offset.min(a.len())),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.offset.min(b.len())),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}

/// Row-major product `a[m×k] * b[k×n]`.
pub(crate) fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    gemm(
        m,
        k,
        n,
        T::one(),
        a,
        View::rows(0, k),
        b,
        View::rows(0, n),
        T::zero(),
        &mut out,
        View::rows(0, n),
    );
    out
}

/// In-place numerically stable softmax over contiguous rows of length `n`.
///
/// `keep`, when given, has one flag per entry of `x`; dropped entries receive
/// zero probability. A row with no kept entries is treated as fully unmasked.
pub(crate) fn softmax_rows<T: Scalar>(x: &mut [T], n: usize, keep: Option<&[bool]>) {
    for (r, row) in x.chunks_mut(n).enumerate() {
        softmax_row(row, keep.map(|k| &k[r * n..(r + 1) * n]));
    }
}

pub(crate) fn softmax_row<T: Scalar>(row: &mut [T], keep: Option<&[bool]>) {
    let keep = keep.filter(|k| k.iter().any(|&b| b));
    let mut max = T::neg_infinity();
    for (i, &v) in row.iter().enumerate() {
        if keep.is_none_or(|k| k[i]) && v > max {
            max = v;
        }
    }
    let mut sum = T::zero();
    for (i, v) in row.iter_mut().enumerate() {
        if keep.is_none_or(|k| k[i]) {
            *v = (*v - max).exp();
            sum = sum + *v;
        } else {
            *v = T::zero();
        }
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v = *v * inv;
    }
}

/// im2col for a single HWC image with square kernel, zero padding `k / 2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn pad(&self) -> usize {
        self.k / 2
    }

    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad() - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad() - self.k) / self.stride + 1
    }

    pub fn patch(&self) -> usize {
        self.k * self.k * self.cin
    }
}

pub(crate) fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (ho, wo, patch, pad) = (g.out_h(), g.out_w(), g.patch(), g.pad() as isize);
    let mut cols = vec![T::zero(); ho * wo * patch];
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &mut cols[(oy * wo + ox) * patch..(oy * wo + ox + 1) * patch];
            for ky in 0..g.k {
                let iy = (oy * g.stride + ky) as isize - pad;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.k {
                    let ix = (ox * g.stride + kx) as isize - pad;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let src = (iy as usize * g.w + ix as usize) * g.cin;
                    let dst = (ky * g.k + kx) * g.cin;
                    row[dst..dst + g.cin].copy_from_slice(&x[src..src + g.cin]);
                }
            }
        }
    }
    cols
}

pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (ho, wo, patch, pad) = (g.out_h(), g.out_w(), g.patch(), g.pad() as isize);
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &cols[(oy * wo + ox) * patch..(oy * wo + ox + 1) * patch];
            for ky in 0..g.k {
                let iy = (oy * g.stride + ky) as isize - pad;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.k {
                    let ix = (ox * g.stride + kx) as isize - pad;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let dst = (iy as usize * g.w + ix as usize) * g.cin;
                    let src = (ky * g.k + kx) * g.cin;
                    for c in 0..g.cin {
                        dx[dst + c] = dx[dst + c] + row[src + c];
                    }
                }
            }
        }
    }
}

#[inline]
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let k = T::c(0.797_884_560_802_865_4);
    let a = T::c(0.044_715);
    let half = T::c(0.5);
    half * x * (T::one() + tanh(k * (x + a * x * x * x)))
}

/// `tanh` through a single `exp`, several times faster than the libm call.
#[inline]
pub(crate) fn tanh<T: Scalar>(y: T) -> T {
    let two = T::c(2.0);
    T::one() - two / (T::one() + (two * y).exp())
}

#[inline]
pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::c(0.797_884_560_802_865_4);
    let a = T::c(0.044_715);
    let half = T::c(0.5);
    let t = tanh(k * (x + a * x * x * x));
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::c(3.0) * a * x * x)
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}
