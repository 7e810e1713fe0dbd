//! Raw numeric kernels shared by the tensor ops.
//!
//! All matrices are dense row-major `f64`.  The three matmul entry points
//! differ only in which operand is read transposed; none of them copies.

/// `out = beta * out + a @ b` with `a: m x k`, `b: k x n`, `out: m x n`.
pub(crate) fn mm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `out = beta * out + a @ b^T` with `a: m x k`, `b: n x k`, `out: m x n`.
pub(crate) fn mm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `out = beta * out + a^T @ b` with `a: k x m`, `b: k x n`, `out: m x n`.
pub(crate) fn mm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, out: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Maximum absolute column sum (the induced 1-norm) of a square matrix.
pub(crate) fn norm_1(n: usize, a: &[f64]) -> f64 {
    let mut best = 0.0f64;
    for j in 0..n {
        let mut col = 0.0;
        for i in 0..n {
            col += a[i * n + j].abs();
        }
        best = best.max(col);
    }
    best
}

/// Scaling threshold for the matrix exponential: the input is halved until
/// its 1-norm drops below this before the Taylor series is evaluated.
const EXPM_THETA: f64 = 0.25;
/// Taylor degree used on the scaled matrix.  With a 1-norm below
/// `EXPM_THETA` the first omitted term is below 1e-21, so the result is
/// rounding-limited.
const EXPM_DEGREE: usize = 14;

/// Matrix exponential of a dense square matrix by scaling-and-squaring with
/// a truncated Taylor series.
pub(crate) fn expm(n: usize, a: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), n * n);
    let norm = norm_1(n, a);
    let squarings = if norm > EXPM_THETA {
        ((norm / EXPM_THETA).log2().ceil() as usize).min(60)
    } else {
        0
    };
    let scale = 0.5f64.powi(squarings as i32);
    let scaled: Vec<f64> = a.iter().map(|v| v * scale).collect();

    let mut result = identity(n);
    let mut term = identity(n);
    let mut next = vec![0.0; n * n];
    for degree in 1..=EXPM_DEGREE {
        next.iter_mut().for_each(|v| *v = 0.0);
        mm_nn(n, n, n, &term, &scaled, 0.0, &mut next);
        let inv = 1.0 / degree as f64;
        for (t, s) in term.iter_mut().zip(next.iter()) {
            *t = s * inv;
        }
        for (r, t) in result.iter_mut().zip(term.iter()) {
            *r += t;
        }
    }

    let mut square = vec![0.0; n * n];
    for _ in 0..squarings {
        square.iter_mut().for_each(|v| *v = 0.0);
        mm_nn(n, n, n, &result, &result, 0.0, &mut square);
        std::mem::swap(&mut result, &mut square);
    }
    result
}

/// Adjoint of the matrix exponential: given the upstream gradient `g` of a
/// scalar loss with respect to `e^A`, returns the gradient with respect to
/// `A`.  Computed as the upper-right block of `exp([[A^T, g], [0, A^T]])`,
/// which is the Frechet derivative of `exp` at `A^T` applied to `g`.  For
/// `g = I` this reduces to `(e^A)^T`.
pub(crate) fn expm_vjp(n: usize, a: &[f64], g: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), n * n);
    debug_assert_eq!(g.len(), n * n);
    let big = 2 * n;
    let mut block = vec![0.0; big * big];
    for i in 0..n {
        for j in 0..n {
            let at = a[j * n + i];
            block[i * big + j] = at;
            block[(n + i) * big + (n + j)] = at;
            block[i * big + (n + j)] = g[i * n + j];
        }
    }
    let e = expm(big, &block);
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = e[i * big + (n + j)];
        }
    }
    out
}

pub(crate) fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}
