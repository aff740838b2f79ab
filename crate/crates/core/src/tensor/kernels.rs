//! Inner loops for matrix products. Every kernel accumulates (`c += ...`).
//!
//! Work is split over output rows only, so results are bitwise identical
//! for any thread count.

use std::sync::OnceLock;

use super::Real;

const PARALLEL_MIN_WORK: usize = 1 << 20;

/// Intra-op thread cap, read once from `STXV3_THREADS`.
pub fn thread_count() -> usize {
    static THREADS: OnceLock<usize> = OnceLock::new();
    *THREADS.get_or_init(|| {
        std::env::var("STXV3_THREADS")
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|&n| n > 0)
            .unwrap_or_else(|| {
                std::thread::available_parallelism()
                    .map(|n| n.get())
                    .unwrap_or(1)
            })
    })
}

fn for_rows<R: Real>(
    c: &mut [R],
    rows: usize,
    row_len: usize,
    work: usize,
    f: impl Fn(usize, &mut [R]) + Sync,
) {
    let threads = thread_count().min(rows);
    if threads <= 1 || work < PARALLEL_MIN_WORK || row_len == 0 {
        for (i, row) in c.chunks_mut(row_len.max(1)).enumerate().take(rows) {
            f(i, row);
        }
        return;
    }
    let per = rows.div_ceil(threads);
    std::thread::scope(|s| {
        for (t, block) in c.chunks_mut(per * row_len).enumerate() {
            let f = &f;
            s.spawn(move || {
                for (j, row) in block.chunks_mut(row_len).enumerate() {
                    f(t * per + j, row);
                }
            });
        }
    });
}

#[inline]
pub fn dot<R: Real>(a: &[R], b: &[R]) -> R {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [R::zero(); 8];
    let chunks = n / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut tail = R::zero();
    for i in chunks * 8..n {
        tail = tail + a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
fn axpy<R: Real>(alpha: R, x: &[R], y: &mut [R]) {
    for (y, &x) in y.iter_mut().zip(x) {
        *y = *y + alpha * x;
    }
}

/// `c[m,n] += a[m,k] · b[k,n]`
pub fn matmul_acc<R: Real>(a: &[R], b: &[R], c: &mut [R], m: usize, k: usize, n: usize) {
    for_rows(c, m, n, m * k * n, |i, crow| {
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == R::zero() {
                continue;
            }
            axpy(aik, &b[kk * n..(kk + 1) * n], crow);
        }
    });
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`
pub fn matmul_bt_acc<R: Real>(a: &[R], b: &[R], c: &mut [R], m: usize, k: usize, n: usize) {
    for_rows(c, m, n, m * k * n, |i, crow| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, cij) in crow.iter_mut().enumerate() {
            *cij = *cij + dot(arow, &b[j * k..(j + 1) * k]);
        }
    });
}

/// `c[k,n] += a[m,k]ᵀ · b[m,n]`
pub fn matmul_at_acc<R: Real>(a: &[R], b: &[R], c: &mut [R], m: usize, k: usize, n: usize) {
    for_rows(c, k, n, m * k * n, |kk, crow| {
        for i in 0..m {
            let aik = a[i * k + kk];
            if aik == R::zero() {
                continue;
            }
            axpy(aik, &b[i * n..(i + 1) * n], crow);
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for kk in 0..k {
                    c[i * n + j] += a[i * k + kk] * b[kk * n + j];
                }
            }
        }
        c
    }

    fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn three_kernels_agree_with_naive() {
        let (m, k, n) = (5, 11, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.71).cos()).collect();
        let want = naive(&a, &b, m, k, n);

        let mut c = vec![0.0; m * n];
        matmul_acc(&a, &b, &mut c, m, k, n);
        let mut c2 = vec![0.0; m * n];
        matmul_bt_acc(&a, &transpose(&b, k, n), &mut c2, m, k, n);
        let mut c3 = vec![0.0; m * n];
        matmul_at_acc(&transpose(&a, m, k), &b, &mut c3, k, m, n);
        for i in 0..m * n {
            assert!((c[i] - want[i]).abs() < 1e-12);
            assert!((c2[i] - want[i]).abs() < 1e-12);
            assert!((c3[i] - want[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn dot_handles_tails() {
        let a: Vec<f64> = (0..19).map(|i| i as f64).collect();
        let want: f64 = a.iter().map(|x| x * x).sum();
        assert_eq!(dot(&a, &a), want);
    }
}
