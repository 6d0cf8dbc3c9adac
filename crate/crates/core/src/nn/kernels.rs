//! Inner loops for the matrix ops. Loop orders keep the innermost index
//! contiguous so the compiler can vectorize them.

use super::Real;

/// Strided read-only view of `rows × len` values inside a `rows × stride` buffer.
#[derive(Clone, Copy)]
pub(crate) struct Strided<'a, T> {
    pub data: &'a [T],
    pub stride: usize,
    pub offset: usize,
    pub len: usize,
}

impl<'a, T> Strided<'a, T> {
    #[inline]
    pub fn row(&self, r: usize) -> &'a [T] {
        let s = r * self.stride + self.offset;
        &self.data[s..s + self.len]
    }
}

/// `out[r, :] += x[r, :] · W`, with `W` stored `x.len × out_cols`.
pub(crate) fn matmul_acc<T: Real>(out: &mut [T], out_cols: usize, x: Strided<'_, T>, w: &[T]) {
    debug_assert_eq!(w.len(), x.len * out_cols);
    for (r, orow) in out.chunks_exact_mut(out_cols).enumerate() {
        let xr = x.row(r);
        for (i, &xi) in xr.iter().enumerate() {
            if xi == T::zero() {
                continue;
            }
            let wrow = &w[i * out_cols..(i + 1) * out_cols];
            for (o, &wv) in orow.iter_mut().zip(wrow) {
                *o += xi * wv;
            }
        }
    }
}

/// `dW += xᵀ · dz`.
pub(crate) fn matmul_xt_acc<T: Real>(dw: &mut [T], x: Strided<'_, T>, dz: &[T], dz_cols: usize) {
    debug_assert_eq!(dw.len(), x.len * dz_cols);
    for (r, dzr) in dz.chunks_exact(dz_cols).enumerate() {
        let xr = x.row(r);
        for (i, &xi) in xr.iter().enumerate() {
            if xi == T::zero() {
                continue;
            }
            let drow = &mut dw[i * dz_cols..(i + 1) * dz_cols];
            for (d, &g) in drow.iter_mut().zip(dzr) {
                *d += xi * g;
            }
        }
    }
}

/// `dx[r, :] += dz[r, :] · Wᵀ`, scattered into a strided destination.
pub(crate) fn matmul_wt_acc<T: Real>(
    dx: &mut [T],
    dx_stride: usize,
    dx_offset: usize,
    in_len: usize,
    dz: &[T],
    dz_cols: usize,
    w: &[T],
) {
    for (r, dzr) in dz.chunks_exact(dz_cols).enumerate() {
        let base = r * dx_stride + dx_offset;
        let dxr = &mut dx[base..base + in_len];
        for (i, d) in dxr.iter_mut().enumerate() {
            *d += dot(dzr, &w[i * dz_cols..(i + 1) * dz_cols]);
        }
    }
}

/// Dot product with eight independent accumulators.
#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (pa, pb) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for k in 0..8 {
            acc[k] += pa[k] * pb[k];
        }
    }
    let mut tail = T::zero();
    for k in chunks * 8..a.len() {
        tail += a[k] * b[k];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_triple_loop() {
        let (rows, inn, out) = (3, 5, 4);
        let x: Vec<f64> = (0..rows * inn).map(|i| (i as f64 * 0.37).sin()).collect();
        let w: Vec<f64> = (0..inn * out).map(|i| (i as f64 * 0.91).cos()).collect();
        let mut y = vec![0.0; rows * out];
        let view = Strided {
            data: &x,
            stride: inn,
            offset: 0,
            len: inn,
        };
        matmul_acc(&mut y, out, view, &w);
        for r in 0..rows {
            for j in 0..out {
                let mut s = 0.0;
                for i in 0..inn {
                    s += x[r * inn + i] * w[i * out + j];
                }
                assert!((y[r * out + j] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dot_handles_tails() {
        let a: Vec<f64> = (0..19).map(|i| i as f64).collect();
        let expected: f64 = a.iter().map(|x| x * x).sum();
        assert_eq!(dot(&a, &a), expected);
    }
}
