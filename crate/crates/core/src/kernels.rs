//! Dense matrix kernels on row-major slices.
//!
//! Rows of the output are split across the rayon pool; every output element
//! is still reduced sequentially in ascending index order, so results are
//! bit-identical for any thread count.

use rayon::prelude::*;

use crate::scalar::Scalar;

const PAR_THRESHOLD: usize = 1 << 16;

fn rows_mut<T: Scalar>(c: &mut [T], n: usize, work: usize, f: impl Fn(usize, &mut [T]) + Sync) {
    if work >= PAR_THRESHOLD && c.len() > n {
        c.par_chunks_mut(n).enumerate().for_each(|(i, row)| f(i, row));
    } else {
        c.chunks_mut(n).enumerate().for_each(|(i, row)| f(i, row));
    }
}

/// `c += a · b` with `a: m×k`, `b: k×n`.
pub fn gemm_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    rows_mut(c, n, m * k * n, |i, row| {
        let ar = &a[i * k..(i + 1) * k];
        for (p, &av) in ar.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(br) {
                *cv = *cv + av * bv;
            }
        }
    });
}

/// `c += a · bᵀ` with `a: m×k`, `b: n×k`.
pub fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    rows_mut(c, n, m * k * n, |i, row| {
        let ar = &a[i * k..(i + 1) * k];
        for (j, cv) in row.iter_mut().enumerate() {
            let br = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in ar.iter().zip(br) {
                acc = acc + x * y;
            }
            *cv = *cv + acc;
        }
    });
}

/// `c += aᵀ · b` with `a: k×m`, `b: k×n`.
pub fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    rows_mut(c, n, m * k * n, |i, row| {
        for p in 0..k {
            let av = a[p * m + i];
            if av == T::zero() {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(br) {
                *cv = *cv + av * bv;
            }
        }
    });
}
