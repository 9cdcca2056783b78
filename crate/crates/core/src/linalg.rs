//! Small dense-vector kernels shared across modules.
//!
//! Reductions use 64-bit accumulators in a fixed order, so parallelism
//! over rows never changes results.

use ndarray::Array2;

/// Four interleaved accumulators, combined in a fixed order: vectorizes,
/// and the result depends only on the inputs.
#[inline]
fn dot4<A: Copy, B: Copy>(a: &[A], b: &[B], mul: impl Fn(A, B) -> f64) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += mul(x[l], y[l]);
        }
    }
    let mut tail = 0.0;
    for (&x, &y) in ra.iter().zip(rb) {
        tail += mul(x, y);
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + tail
}

#[inline]
pub(crate) fn dot_f32(a: &[f32], b: &[f32]) -> f64 {
    dot4(a, b, |x, y| f64::from(x) * f64::from(y))
}

#[inline]
pub(crate) fn dot_f64(a: &[f64], b: &[f64]) -> f64 {
    dot4(a, b, |x, y| x * y)
}

#[inline]
pub(crate) fn dot_mixed(a: &[f32], b: &[f64]) -> f64 {
    dot4(a, b, |x, y| f64::from(x) * y)
}

pub(crate) fn norm_f64(a: &[f64]) -> f64 {
    dot_f64(a, a).sqrt()
}

/// Normalizes in place; returns false (leaving `v` untouched) for a zero vector.
pub(crate) fn normalize_f64(v: &mut [f64]) -> bool {
    let n = norm_f64(v);
    if n == 0.0 || !n.is_finite() {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= n);
    true
}

pub(crate) fn normalized(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    normalize_f64(&mut out);
    out
}

pub(crate) fn row_slice<T>(m: &Array2<T>, i: usize) -> &[T] {
    m.row(i)
        .to_slice()
        .expect("matrices in this crate are standard-layout")
}

/// `log(sum(exp(x)))` with max subtraction.
pub(crate) fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}
