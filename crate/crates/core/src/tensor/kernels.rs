//! Raw slice kernels. Every kernel accumulates in a fixed order, so results
//! are bitwise reproducible.

use super::Element;
use crate::error::{Error, Result};

pub(crate) fn dims4(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [a, b, c, d] => Ok((a, b, c, d)),
        _ => Err(Error::dim(op, shape, &[0, 0, 0, 0])),
    }
}

/// `c[m,n] = a[m,k] * b[k,n]`.
pub(crate) fn matmul<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    matmul_acc(a, b, &mut c, m, k, n);
    c
}

/// Runs `$body` through a copy compiled with AVX2 when the CPU has it.
/// Multiply and add are never fused, so both paths produce identical bits.
macro_rules! with_wide_simd {
    ($body:expr) => {{
        #[cfg(target_arch = "x86_64")]
        {
            #[target_feature(enable = "avx2")]
            unsafe fn wide<R>(f: impl FnOnce() -> R) -> R {
                f()
            }
            if std::arch::is_x86_feature_detected!("avx2") {
                // SAFETY: the feature was detected at runtime.
                unsafe { wide(|| $body) }
            } else {
                $body
            }
        }
        #[cfg(not(target_arch = "x86_64"))]
        {
            $body
        }
    }};
}

/// `c += a0*b0 + a1*b1 + ...` over up to four rows, added one row at a time
/// so the per-element accumulation order matches a plain row-by-row loop.
#[inline(always)]
fn axpy_rows<T: Element>(c: &mut [T], coef: &[T], rows: &[&[T]]) {
    if let ([a0, a1, a2, a3], [b0, b1, b2, b3]) = (coef, rows) {
        let n = c.len();
        let (b0, b1, b2, b3) = (&b0[..n], &b1[..n], &b2[..n], &b3[..n]);
        for j in 0..n {
            let mut v = c[j];
            v += *a0 * b0[j];
            v += *a1 * b1[j];
            v += *a2 * b2[j];
            v += *a3 * b3[j];
            c[j] = v;
        }
    } else {
        for (&a, b) in coef.iter().zip(rows) {
            for (cv, &bv) in c.iter_mut().zip(b.iter()) {
                *cv += a * bv;
            }
        }
    }
}

#[inline(always)]
fn matmul_acc_body<T: Element>(a: &[T], b: &[T], c: &mut [T], k: usize, n: usize) {
    let brows: Vec<&[T]> = b.chunks_exact(n).collect();
    for (arow, crow) in a.chunks_exact(k).zip(c.chunks_exact_mut(n)) {
        for (coef, rows) in arow.chunks(4).zip(brows.chunks(4)) {
            axpy_rows(crow, coef, rows);
        }
    }
}

/// `c[m,n] += a[m,k] * b[k,n]` with an i-k-j loop so the inner loop is a
/// contiguous axpy over four rows of `b` at a time.
pub(crate) fn matmul_acc<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if k == 0 || n == 0 {
        return;
    }
    with_wide_simd!(matmul_acc_body(a, b, c, k, n))
}

#[inline(always)]
fn matmul_at_body<T: Element>(a: &[T], b: &[T], c: &mut [T], k: usize, n: usize) {
    let arows: Vec<&[T]> = a.chunks_exact(k).collect();
    let brows: Vec<&[T]> = b.chunks_exact(n).collect();
    let mut coef = [T::zero(); 4];
    for (ablock, bblock) in arows.chunks(4).zip(brows.chunks(4)) {
        for (kk, crow) in c.chunks_exact_mut(n).enumerate() {
            for (slot, arow) in coef.iter_mut().zip(ablock) {
                *slot = arow[kk];
            }
            axpy_rows(crow, &coef[..ablock.len()], bblock);
        }
    }
}

/// `c[k,n] = a[m,k]^T * b[m,n]`.
pub(crate) fn matmul_at<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    let mut c = vec![T::zero(); k * n];
    if k == 0 || n == 0 {
        return c;
    }
    with_wide_simd!(matmul_at_body(a, b, &mut c, k, n));
    c
}

pub(crate) fn transpose<T: Element>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

pub(crate) fn check_axes(rank: usize, axes: &[usize]) -> Result<()> {
    let mut seen = vec![false; rank];
    if axes.len() != rank {
        return Err(Error::Contract(format!("permutation {axes:?} for rank {rank}")));
    }
    for &a in axes {
        if a >= rank || seen[a] {
            return Err(Error::Contract(format!("permutation {axes:?} for rank {rank}")));
        }
        seen[a] = true;
    }
    Ok(())
}

pub(crate) fn permute<T: Element>(
    data: &[T],
    shape: &[usize],
    axes: &[usize],
) -> Result<(Vec<usize>, Vec<T>)> {
    check_axes(shape.len(), axes)?;
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    if rank == 0 {
        out.extend_from_slice(data);
        return Ok((out_shape, out));
    }
    // Innermost output axis copied in a tight loop; outer axes advanced by an odometer.
    let last = rank - 1;
    let inner_len = out_shape[last];
    let inner_stride = strides[last];
    let mut idx = vec![0usize; rank];
    let outer: usize = out_shape[..last].iter().product();
    for _ in 0..outer {
        let base: usize = idx[..last].iter().zip(&strides).map(|(i, s)| i * s).sum();
        for j in 0..inner_len {
            out.push(data[base + j * inner_stride]);
        }
        for ax in (0..last).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Ok((out_shape, out))
}

pub(crate) fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn rows(&self) -> usize {
        self.b * self.oh * self.ow
    }
}

/// Unfolds `[b,c,h,w]` into `[b*oh*ow, c*kh*kw]`.
pub(crate) fn im2col<T: Element>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let plen = g.patch_len();
    let mut cols = vec![T::zero(); g.rows() * plen];
    for bi in 0..g.b {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let row = ((bi * g.oh + oy) * g.ow + ox) * plen;
                for ci in 0..g.c {
                    let plane = (bi * g.c + ci) * g.h * g.w;
                    for ky in 0..g.kh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..g.kw {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            cols[row + (ci * g.kh + ky) * g.kw + kx] =
                                x[plane + iy as usize * g.w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters-adds columns back into `[b,c,h,w]`.
pub(crate) fn col2im<T: Element>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let plen = g.patch_len();
    let mut x = vec![T::zero(); g.b * g.c * g.h * g.w];
    for bi in 0..g.b {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let row = ((bi * g.oh + oy) * g.ow + ox) * plen;
                for ci in 0..g.c {
                    let plane = (bi * g.c + ci) * g.h * g.w;
                    for ky in 0..g.kh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..g.kw {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            x[plane + iy as usize * g.w + ix as usize] +=
                                cols[row + (ci * g.kh + ky) * g.kw + kx];
                        }
                    }
                }
            }
        }
    }
    x
}
