//! Dense inner loops shared by forward and adjoint passes.

use super::Real;

pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    T::narrow(dot_wide(a, b))
}

/// Inner product accumulated in f64. Keeping reductions wide makes results
/// at f32 insensitive to summation order (e.g. a permuted point set).
fn dot_wide<T: Real>(a: &[T], b: &[T]) -> f64 {
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l].widen() * y[l].widen();
        }
    }
    let mut s = (acc[0] + acc[4]) + (acc[1] + acc[5]) + (acc[2] + acc[6]) + (acc[3] + acc[7]);
    for (x, y) in ra.iter().zip(rb) {
        s += x.widen() * y.widen();
    }
    s
}

#[inline]
pub(crate) fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
fn axpy_wide<T: Real>(alpha: f64, x: &[T], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi.widen();
    }
}

/// c[n,m] += a[n,k] · b[k,m]
pub(crate) fn mm_nn<T: Real>(a: &[T], b: &[T], c: &mut [T], n: usize, k: usize, m: usize) {
    let mut acc = vec![0.0f64; m];
    for i in 0..n {
        let ci = &mut c[i * m..(i + 1) * m];
        acc.iter_mut().zip(ci.iter()).for_each(|(w, v)| *w = v.widen());
        for p in 0..k {
            let aip = a[i * k + p];
            if aip != T::zero() {
                axpy_wide(aip.widen(), &b[p * m..(p + 1) * m], &mut acc);
            }
        }
        ci.iter_mut().zip(&acc).for_each(|(v, &w)| *v = T::narrow(w));
    }
}

/// c[n,m] += a[n,k] · b[m,k]ᵀ
pub(crate) fn mm_nt<T: Real>(a: &[T], b: &[T], c: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let ai = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let v = &mut c[i * m + j];
            *v = T::narrow(v.widen() + dot_wide(ai, &b[j * k..(j + 1) * k]));
        }
    }
}

/// c[n,m] += a[k,n]ᵀ · b[k,m]
pub(crate) fn mm_tn<T: Real>(a: &[T], b: &[T], c: &mut [T], k: usize, n: usize, m: usize) {
    let mut acc: Vec<f64> = c[..n * m].iter().map(|v| v.widen()).collect();
    for p in 0..k {
        let bp = &b[p * m..(p + 1) * m];
        for i in 0..n {
            let api = a[p * n + i];
            if api != T::zero() {
                axpy_wide(api.widen(), bp, &mut acc[i * m..(i + 1) * m]);
            }
        }
    }
    c[..n * m].iter_mut().zip(&acc).for_each(|(v, &w)| *v = T::narrow(w));
}

pub(crate) fn transpose<T: Real>(a: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

/// Range of output positions `t` for which `t + k - pad` lies in `0..len`.
#[inline]
pub(crate) fn conv_range(len: usize, k: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k);
    let hi = (len + pad).saturating_sub(k).min(len);
    (lo, hi.max(lo))
}
