//! Thin wrappers over `matrixmultiply` for row-major buffers.

/// `c = a · b` (or `c += a · b` when `accumulate`), with optional transposition
/// of either operand. Logical shapes: op(a) is `m×k`, op(b) is `k×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: strides describe the exact row-major extents asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn transpose(rows: usize, cols: usize, src: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

/// Largest singular value of a row-major square matrix by power iteration on `AᵀA`.
pub fn spectral_norm(n: usize, a: &[f64]) -> f64 {
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut ata = vec![0.0; n * n];
    gemm(n, n, n, a, true, a, false, &mut ata, false);
    let mut lambda = 0.0;
    for _ in 0..500 {
        let mut w = vec![0.0; n];
        gemm(n, n, 1, &ata, false, &v, false, &mut w, false);
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let next: Vec<f64> = w.iter().map(|x| x / norm).collect();
        let delta: f64 = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
        v = next;
        lambda = norm;
        if delta < 1e-14 {
            break;
        }
    }
    lambda.sqrt()
}
