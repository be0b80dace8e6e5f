//! Dense kernels used by the tape: matrix products, Cholesky factorization and
//! triangular solves. All matrices are row-major `f64` slices.

use super::{NdError, Tensor};

/// `C = alpha * op(A) * op(B) + beta * C`, where `op` optionally transposes.
///
/// `a` is stored as `m x k` (or `k x m` when `trans_a`), `b` as `k x n`
/// (or `n x k` when `trans_b`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: lengths checked above; strides describe the stated layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
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

pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    assert_eq!(k, b.rows(), "matmul inner dimension");
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, 1.0, a.data(), false, b.data(), false, 0.0, &mut out);
    Tensor::mat(m, n, out)
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
/// Only the lower triangle of `a` is read.
pub fn cholesky(a: &Tensor) -> Result<Tensor, NdError> {
    let n = a.rows();
    if a.cols() != n {
        return Err(NdError::Shape(format!("cholesky of {:?}", a.shape())));
    }
    let src = a.data();
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = src[j * n + j];
        for p in 0..j {
            d -= l[j * n + p] * l[j * n + p];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(NdError::NotPositiveDefinite { pivot: j, value: d });
        }
        let djj = d.sqrt();
        l[j * n + j] = djj;
        for i in j + 1..n {
            let mut s = src[i * n + j];
            for p in 0..j {
                s -= l[i * n + p] * l[j * n + p];
            }
            l[i * n + j] = s / djj;
        }
    }
    Ok(Tensor::mat(n, n, l))
}

/// Solves `L X = B` for lower-triangular `L`.
pub fn solve_lower(l: &Tensor, b: &Tensor) -> Tensor {
    let n = l.rows();
    let m = b.cols();
    assert_eq!(b.rows(), n);
    let ld = l.data();
    let mut x = b.data().to_vec();
    for i in 0..n {
        for p in 0..i {
            let lip = ld[i * n + p];
            if lip != 0.0 {
                let (head, tail) = x.split_at_mut(i * m);
                let xp = &head[p * m..(p + 1) * m];
                for (xi, &xpv) in tail[..m].iter_mut().zip(xp) {
                    *xi -= lip * xpv;
                }
            }
        }
        let inv = 1.0 / ld[i * n + i];
        for v in &mut x[i * m..(i + 1) * m] {
            *v *= inv;
        }
    }
    Tensor::mat(n, m, x)
}

/// Solves `L^T X = B` for lower-triangular `L`.
pub fn solve_lower_transpose(l: &Tensor, b: &Tensor) -> Tensor {
    let n = l.rows();
    let m = b.cols();
    assert_eq!(b.rows(), n);
    let ld = l.data();
    let mut x = b.data().to_vec();
    for i in (0..n).rev() {
        for p in i + 1..n {
            // (L^T)[i, p] = L[p, i]
            let lpi = ld[p * n + i];
            if lpi != 0.0 {
                let (head, tail) = x.split_at_mut(p * m);
                let xp = &tail[..m];
                for (xi, &xpv) in head[i * m..(i + 1) * m].iter_mut().zip(xp) {
                    *xi -= lpi * xpv;
                }
            }
        }
        let inv = 1.0 / ld[i * n + i];
        for v in &mut x[i * m..(i + 1) * m] {
            *v *= inv;
        }
    }
    Tensor::mat(n, m, x)
}

/// Keeps the lower triangle (including the diagonal) and zeroes the rest.
pub fn tril(a: &Tensor) -> Tensor {
    let n = a.cols();
    let mut out = a.clone();
    for i in 0..a.rows() {
        for j in i + 1..n {
            out.data_mut()[i * n + j] = 0.0;
        }
    }
    out
}

/// Cholesky factorization of `a + jitter * I`, escalating the jitter by factors
/// of ten from `start` up to `max`. Returns the factor and the jitter used.
pub fn cholesky_with_jitter(a: &Tensor, start: f64, max: f64) -> Result<(Tensor, f64), NdError> {
    let n = a.rows();
    let mut jitter = start;
    loop {
        let mut shifted = a.clone();
        for i in 0..n {
            shifted.data_mut()[i * n + i] += jitter;
        }
        match cholesky(&shifted) {
            Ok(l) => return Ok((l, jitter)),
            Err(e) if jitter * 10.0 > max * (1.0 + 1e-9) => {
                return Err(NdError::CholeskyFailed {
                    jitter,
                    reason: e.to_string(),
                })
            }
            Err(_) => jitter *= 10.0,
        }
    }
}
