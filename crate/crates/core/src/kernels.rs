//! Dense matrix kernels shared by the forward and backward passes.
//!
//! Everything is row-major `&[E]` with explicit extents. The core kernel is
//! `mm_nt` (A times B-transposed) because linear-layer weights are stored
//! `[out x in]`; the nn/tn variants pack their operand into a transposed
//! scratch buffer first, which costs O(rows+cols) per output element and is
//! noise next to the multiply itself.
//!
//! Every output element is a single `dot` over a fixed accumulator layout,
//! so results are bit-identical across runs and thread counts.

use crate::elem::Elem;
use rayon::prelude::*;

/// Minimum number of output rows before a matmul fans out over rayon.
const PAR_ROWS: usize = 256;

/// Fixed-order dot product with eight independent accumulators.
#[inline]
pub fn dot<E: Elem>(a: &[E], b: &[E]) -> E {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [E::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let ra = ca.remainder();
    let rb = cb.remainder();
    for (xa, xb) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] = xa[l].mul_add(xb[l], acc[l]);
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (xa, xb) in ra.iter().zip(rb.iter()) {
        s = s + *xa * *xb;
    }
    s
}

/// c[m x n] = a[m x p] * bt[n x p]^T
pub fn mm_nt<E: Elem>(a: &[E], bt: &[E], c: &mut [E], m: usize, p: usize, n: usize) {
    debug_assert_eq!(a.len(), m * p);
    debug_assert_eq!(bt.len(), n * p);
    debug_assert_eq!(c.len(), m * n);
    if m >= PAR_ROWS && rayon::current_num_threads() > 1 {
        c.par_chunks_mut(4 * n)
            .enumerate()
            .for_each(|(blk, rows)| mm_nt_rows(a, bt, rows, blk * 4, p, n));
    } else {
        c.chunks_mut(4 * n)
            .enumerate()
            .for_each(|(blk, rows)| mm_nt_rows(a, bt, rows, blk * 4, p, n));
    }
}

/// Kernel body for up to four consecutive output rows starting at `row0`.
fn mm_nt_rows<E: Elem>(a: &[E], bt: &[E], c_rows: &mut [E], row0: usize, p: usize, n: usize) {
    let rows = c_rows.len() / n;
    if rows == 4 {
        let a0 = &a[row0 * p..row0 * p + p];
        let a1 = &a[(row0 + 1) * p..(row0 + 1) * p + p];
        let a2 = &a[(row0 + 2) * p..(row0 + 2) * p + p];
        let a3 = &a[(row0 + 3) * p..(row0 + 3) * p + p];
        let (c01, c23) = c_rows.split_at_mut(2 * n);
        let (c0, c1) = c01.split_at_mut(n);
        let (c2, c3) = c23.split_at_mut(n);
        for j in 0..n {
            let br = &bt[j * p..j * p + p];
            c0[j] = dot(a0, br);
            c1[j] = dot(a1, br);
            c2[j] = dot(a2, br);
            c3[j] = dot(a3, br);
        }
    } else {
        for (i, cr) in c_rows.chunks_mut(n).enumerate() {
            let ar = &a[(row0 + i) * p..(row0 + i) * p + p];
            for j in 0..n {
                cr[j] = dot(ar, &bt[j * p..j * p + p]);
            }
        }
    }
}

/// c[m x n] = a[m x p] * b[p x n]
pub fn mm_nn<E: Elem>(a: &[E], b: &[E], c: &mut [E], m: usize, p: usize, n: usize) {
    let bt = transpose(b, p, n);
    mm_nt(a, &bt, c, m, p, n);
}

/// c[m x n] = a[p x m]^T * b[p x n]
pub fn mm_tn<E: Elem>(a: &[E], b: &[E], c: &mut [E], p: usize, m: usize, n: usize) {
    let at = transpose(a, p, m);
    let bt = transpose(b, p, n);
    mm_nt(&at, &bt, c, m, p, n);
}

/// Row-major transpose into a fresh buffer.
pub fn transpose<E: Elem>(x: &[E], rows: usize, cols: usize) -> Vec<E> {
    debug_assert_eq!(x.len(), rows * cols);
    let mut t = vec![E::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = x[i * cols + j];
        }
    }
    t
}

/// y += x, elementwise.
#[inline]
pub fn axpy<E: Elem>(y: &mut [E], x: &[E]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x.iter()) {
        *yi += *xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute<E: Elem>(a: &[E], b: &[E], m: usize, p: usize, n: usize) -> Vec<E> {
        let mut c = vec![E::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = E::zero();
                for k in 0..p {
                    s = s + a[i * p + k] * b[k * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn nt_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(m, p, n) in &[(3, 4, 2), (7, 5, 9), (16, 64, 33), (1, 1, 1)] {
            let a: Vec<f64> = (0..m * p).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..p * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let bt = transpose(&b, p, n);
            let mut c = vec![0.0; m * n];
            mm_nt(&a, &bt, &mut c, m, p, n);
            let want = brute(&a, &b, m, p, n);
            for (x, y) in c.iter().zip(want.iter()) {
                assert!((x - y).abs() < 1e-12, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn nn_and_tn_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (m, p, n) = (6, 10, 5);
        let a: Vec<f64> = (0..m * p).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..p * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut c = vec![0.0; m * n];
        mm_nn(&a, &b, &mut c, m, p, n);
        let want = brute(&a, &b, m, p, n);
        for (x, y) in c.iter().zip(want.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        // tn: build a' = a^T stored [p x m], then mm_tn(a') == a @ b
        let at = transpose(&a, m, p);
        let mut c2 = vec![0.0; m * n];
        mm_tn(&at, &b, &mut c2, p, m, n);
        for (x, y) in c2.iter().zip(want.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (m, p, n) = (512, 64, 64);
        let a: Vec<f32> = (0..m * p).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bt: Vec<f32> = (0..n * p).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut c1 = vec![0.0f32; m * n];
        let mut c4 = vec![0.0f32; m * n];
        let pool1 = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let pool4 = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        pool1.install(|| mm_nt(&a, &bt, &mut c1, m, p, n));
        pool4.install(|| mm_nt(&a, &bt, &mut c4, m, p, n));
        assert_eq!(c1, c4);
    }
}
