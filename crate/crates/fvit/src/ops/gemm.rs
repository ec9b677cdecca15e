//! Small dense matrix kernels backing convolution and linear layers.
//!
//! Row-major throughout. Parallel variants split the output into disjoint
//! row chunks, so results are bitwise deterministic regardless of thread
//! scheduling.

use rayon::prelude::*;

use crate::scalar::Scalar;

/// Rows below this stay serial; parallel dispatch is not worth it.
const PAR_MIN_ROWS: usize = 8;

/// c[m x n] += a[m x k] * b[k x n]
pub fn matmul_acc<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let body = |i: usize, c_row: &mut [T]| {
        for l in 0..k {
            let alv = a[i * k + l];
            if alv == T::zero() {
                continue;
            }
            let b_row = &b[l * n..(l + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row.iter()) {
                *cv = *cv + alv * bv;
            }
        }
    };
    if m >= PAR_MIN_ROWS {
        c.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in c.chunks_mut(n).enumerate() {
            body(i, row);
        }
    }
}

/// c[k x n] += a^T * b  with a[m x k], b[m x n]
pub fn matmul_at_b_acc<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    let body = |i: usize, c_row: &mut [T]| {
        for o in 0..m {
            let av = a[o * k + i];
            if av == T::zero() {
                continue;
            }
            let b_row = &b[o * n..(o + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row.iter()) {
                *cv = *cv + av * bv;
            }
        }
    };
    if k >= PAR_MIN_ROWS {
        c.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in c.chunks_mut(n).enumerate() {
            body(i, row);
        }
    }
}

/// c[m x p] += a * b^T  with a[m x n], b[p x n]
pub fn matmul_a_bt_acc<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, n: usize, p: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), p * n);
    debug_assert_eq!(c.len(), m * p);
    let body = |i: usize, c_row: &mut [T]| {
        let a_row = &a[i * n..(i + 1) * n];
        for (j, cv) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * n..(j + 1) * n];
            let mut acc = T::zero();
            for (&av, &bv) in a_row.iter().zip(b_row.iter()) {
                acc = acc + av * bv;
            }
            *cv = *cv + acc;
        }
    };
    if m >= PAR_MIN_ROWS {
        c.par_chunks_mut(p)
            .enumerate()
            .for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in c.chunks_mut(p).enumerate() {
            body(i, row);
        }
    }
}
