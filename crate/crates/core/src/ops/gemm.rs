//! Minimal row-major matrix kernels. The i-k-j loop order keeps the inner
//! loop contiguous (autovectorizable) while accumulating each output in a
//! fixed k order, so results are bit-identical from run to run.

use crate::tensor::Element;

/// `c[m x n] += a[m x k] * b[k x n]`
pub fn gemm_acc<E: Element>(c: &mut [E], a: &[E], b: &[E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (l, &ail) in arow.iter().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += ail * bj;
            }
        }
    }
}

/// `c[m x n] += a^T[m x k] * b[k x n]` where `a` is stored `k x m`.
pub fn gemm_at_acc<E: Element>(c: &mut [E], a: &[E], b: &[E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    for l in 0..k {
        let arow = &a[l * m..(l + 1) * m];
        let brow = &b[l * n..(l + 1) * n];
        for i in 0..m {
            let ail = arow[i];
            let crow = &mut c[i * n..(i + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += ail * bj;
            }
        }
    }
}

/// `c[m x n] += a[m x k] * b^T[k x n]` where `b` is stored `n x k`.
/// Each output element is a single contiguous dot product.
pub fn gemm_bt_acc<E: Element>(c: &mut [E], a: &[E], b: &[E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (j, cj) in crow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = E::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *cj += acc;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(m: usize, n: usize, f: impl Fn(usize, usize) -> f64) -> Vec<f64> {
        (0..m * n).map(|i| f(i / n, i % n)).collect()
    }

    #[test]
    fn gemm_matches_triple_loop() {
        let (m, k, n) = (3, 4, 5);
        let a = dense(m, k, |i, j| (i * 7 + j) as f64 * 0.5 - 3.0);
        let b = dense(k, n, |i, j| (i + j * 3) as f64 * 0.25 - 1.0);
        let mut want = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    want[i * n + j] += a[i * k + l] * b[l * n + j];
                }
            }
        }

        let mut c = vec![0.0; m * n];
        gemm_acc(&mut c, &a, &b, m, k, n);
        assert_eq!(c, want);

        // a stored transposed
        let at = dense(k, m, |l, i| a[i * k + l]);
        let mut c2 = vec![0.0; m * n];
        gemm_at_acc(&mut c2, &at, &b, m, k, n);
        for (x, y) in c2.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        // b stored transposed
        let bt = dense(n, k, |j, l| b[l * n + j]);
        let mut c3 = vec![0.0; m * n];
        gemm_bt_acc(&mut c3, &a, &bt, m, k, n);
        for (x, y) in c3.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
