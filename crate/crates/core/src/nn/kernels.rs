//! Dense kernels over row-major slices.

use crate::real::Real;

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += *x * *y;
    }
    s
}

/// `y += alpha * x`
#[inline]
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

/// `out[i, j] = sum_k x[i, k] * w[j, k]` for `x: n×k`, `w: m×k`.
pub fn matmul_nt<T: Real>(x: &[T], k: usize, w: &[T], m: usize, out: &mut [T]) {
    for (xi, oi) in x.chunks_exact(k).zip(out.chunks_exact_mut(m)) {
        for (j, o) in oi.iter_mut().enumerate() {
            *o = dot(xi, &w[j * k..(j + 1) * k]);
        }
    }
}

/// `out[i, :] += sum_j dy[i, j] * w[j, :]` for `dy: n×m`, `w: m×k`.
pub fn matmul_acc<T: Real>(dy: &[T], m: usize, w: &[T], k: usize, out: &mut [T]) {
    for (dyi, oi) in dy.chunks_exact(m).zip(out.chunks_exact_mut(k)) {
        for (j, &g) in dyi.iter().enumerate() {
            if g != T::zero() {
                axpy(g, &w[j * k..(j + 1) * k], oi);
            }
        }
    }
}

/// `dw[j, :] += sum_i dy[i, j] * x[i, :]` for `dy: n×m`, `x: n×k`.
pub fn outer_acc<T: Real>(dy: &[T], m: usize, x: &[T], k: usize, dw: &mut [T]) {
    for (dyi, xi) in dy.chunks_exact(m).zip(x.chunks_exact(k)) {
        for (j, &g) in dyi.iter().enumerate() {
            if g != T::zero() {
                axpy(g, xi, &mut dw[j * k..(j + 1) * k]);
            }
        }
    }
}

/// Numerically stable in-place softmax.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// `log(sum(exp(row)))`
pub fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = row.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}
