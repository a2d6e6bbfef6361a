//! Matmul kernels behind the tape ops.
//!
//! Every output element is produced by exactly one fixed-order loop, so
//! results are identical at any rayon pool size. Reductions use an 8-lane
//! accumulator with a fixed combine order rather than a single serial chain;
//! the bracketing is part of the kernel contract and never varies.

use rayon::prelude::*;

/// Work (in multiply-adds) above which a kernel fans out across threads.
const PAR_THRESHOLD: usize = 1 << 21;
/// Output rows handed to one rayon task.
const ROW_CHUNK: usize = 16;

#[inline]
pub fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x.iter()) {
        *yi += alpha * *xi;
    }
}

/// Dot product with eight independent lanes and a fixed reduction tree.
#[inline]
pub fn dot(x: &[f32], y: &[f32]) -> f32 {
    debug_assert_eq!(x.len(), y.len());
    let mut lanes = [0.0f32; 8];
    let chunks = x.len() / 8;
    for c in 0..chunks {
        let xa = &x[c * 8..c * 8 + 8];
        let ya = &y[c * 8..c * 8 + 8];
        for l in 0..8 {
            lanes[l] += xa[l] * ya[l];
        }
    }
    let mut tail = 0.0f32;
    for i in chunks * 8..x.len() {
        tail += x[i] * y[i];
    }
    let s0 = (lanes[0] + lanes[4]) + (lanes[2] + lanes[6]);
    let s1 = (lanes[1] + lanes[5]) + (lanes[3] + lanes[7]);
    (s0 + s1) + tail
}

fn nn_rows(a: &[f32], b: &[f32], c: &mut [f32], k: usize, n: usize, accumulate: bool) {
    for (a_row, c_row) in a.chunks_exact(k).zip(c.chunks_exact_mut(n)) {
        if !accumulate {
            c_row.fill(0.0);
        }
        for (p, &av) in a_row.iter().enumerate() {
            axpy(av, &b[p * n..(p + 1) * n], c_row);
        }
    }
}

fn nt_rows(a: &[f32], b: &[f32], c: &mut [f32], k: usize, n: usize, accumulate: bool) {
    for (a_row, c_row) in a.chunks_exact(k).zip(c.chunks_exact_mut(n)) {
        for (j, cv) in c_row.iter_mut().enumerate() {
            let d = dot(a_row, &b[j * k..(j + 1) * k]);
            if accumulate {
                *cv += d;
            } else {
                *cv = d;
            }
        }
    }
}

macro_rules! row_parallel {
    ($a:expr, $c:expr, $m:expr, $k:expr, $n:expr, $acc:expr, $body:ident, $b:expr) => {
        if $m * $k * $n >= PAR_THRESHOLD {
            $c.par_chunks_mut(ROW_CHUNK * $n)
                .zip($a.par_chunks(ROW_CHUNK * $k))
                .for_each(|(c_chunk, a_chunk)| $body(a_chunk, $b, c_chunk, $k, $n, $acc));
        } else {
            $body($a, $b, $c, $k, $n, $acc);
        }
    };
}

/// `c = a · b` where a is m×k and b is k×n.
pub fn matmul_nn(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    row_parallel!(a, c, m, k, n, false, nn_rows, b);
}

/// `c += a · b`.
pub fn matmul_nn_acc(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    row_parallel!(a, c, m, k, n, true, nn_rows, b);
}

/// `c = a · bᵀ` where a is m×k and b is n×k (row-major).
pub fn matmul_nt(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    row_parallel!(a, c, m, k, n, false, nt_rows, b);
}

/// `c += a · bᵀ`.
pub fn matmul_nt_acc(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    row_parallel!(a, c, m, k, n, true, nt_rows, b);
}

/// `db += aᵀ · dy` where a is m×k and dy is m×n; db is k×n.
pub fn matmul_tn_acc(a: &[f32], dy: &[f32], db: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(dy.len(), m * n);
    debug_assert_eq!(db.len(), k * n);
    let body = |db_chunk: &mut [f32], p0: usize| {
        for (off, db_row) in db_chunk.chunks_exact_mut(n).enumerate() {
            let p = p0 + off;
            for i in 0..m {
                let av = a[i * k + p];
                if av != 0.0 {
                    axpy(av, &dy[i * n..(i + 1) * n], db_row);
                }
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        db.par_chunks_mut(ROW_CHUNK * n)
            .enumerate()
            .for_each(|(ci, chunk)| body(chunk, ci * ROW_CHUNK));
    } else {
        body(db, 0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn naive_nn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut c = vec![0.0f64; m * n];
        for i in 0..m {
            for p in 0..k {
                for j in 0..n {
                    c[i * n + j] += a[i * k + p] as f64 * b[p * n + j] as f64;
                }
            }
        }
        c.into_iter().map(|v| v as f32).collect()
    }

    #[test]
    fn kernels_agree_with_naive_triple_loop() {
        let mut rng = Rng::new(11, 0);
        for &(m, k, n) in &[(1, 1, 1), (3, 4, 2), (17, 9, 23), (64, 32, 48)] {
            let mut a = vec![0.0; m * k];
            let mut b = vec![0.0; k * n];
            rng.fill_normal(&mut a, 1.0);
            rng.fill_normal(&mut b, 1.0);
            let want = naive_nn(&a, &b, m, k, n);

            let mut c = vec![0.0; m * n];
            matmul_nn(&a, &b, &mut c, m, k, n);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-4, "nn mismatch {x} vs {y}");
            }

            // bt stored as its transpose: b_t is n×k with b_t[j,p] = b[p,j]
            let mut bt = vec![0.0; n * k];
            for p in 0..k {
                for j in 0..n {
                    bt[j * k + p] = b[p * n + j];
                }
            }
            let mut c2 = vec![0.0; m * n];
            matmul_nt(&a, &bt, &mut c2, m, k, n);
            for (x, y) in c2.iter().zip(&want) {
                assert!((x - y).abs() < 1e-4, "nt mismatch {x} vs {y}");
            }
        }
    }

    #[test]
    fn tn_acc_agrees_with_naive() {
        let (m, k, n) = (13, 7, 11);
        let mut rng = Rng::new(5, 0);
        let mut a = vec![0.0; m * k];
        let mut dy = vec![0.0; m * n];
        rng.fill_normal(&mut a, 1.0);
        rng.fill_normal(&mut dy, 1.0);
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let want = naive_nn(&at, &dy, k, m, n);
        let mut db = vec![0.0; k * n];
        matmul_tn_acc(&a, &dy, &mut db, m, k, n);
        for (x, y) in db.iter().zip(&want) {
            assert!((x - y).abs() < 1e-4);
        }
    }

    #[test]
    fn identity_and_projector_products() {
        // I₂ × [[1,2],[3,4]] = [[1,2],[3,4]]
        let eye = [1.0, 0.0, 0.0, 1.0];
        let x = [1.0, 2.0, 3.0, 4.0];
        let mut c = [0.0; 4];
        matmul_nn(&eye, &x, &mut c, 2, 2, 2);
        assert_eq!(c, x);

        // [[1,0],[0,0]] × [[5,6],[7,8]] = [[5,6],[0,0]]
        let p = [1.0, 0.0, 0.0, 0.0];
        let y = [5.0, 6.0, 7.0, 8.0];
        let mut c2 = [0.0; 4];
        matmul_nn(&p, &y, &mut c2, 2, 2, 2);
        assert_eq!(c2, [5.0, 6.0, 0.0, 0.0]);
    }
}
