//! Dense numerics: tensors, masked and gated softmax attention, layer norm,
//! a reverse-mode tape over that op set, and a finite-difference gradient
//! checker.

mod attention;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use attention::{attention, AttentionSpec, GainTarget, Mask};
pub use gradcheck::{grad_check, grad_check_report, GradCheckReport};
pub use graph::{AttnArgs, Gains, Gradients, Graph, Var};
pub use params::ParamStore;
pub use tensor::Tensor;

pub(crate) use attention::attend;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let th = inner.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) const LN_EPS: f64 = 1e-6;

/// Row-wise layer normalization without affine parameters.
pub fn layer_norm_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let c = x.cols();
    for r in 0..x.rows() {
        normalize_row(&mut out.data_mut()[r * c..(r + 1) * c]);
    }
    out
}

/// Normalizes in place, returning the reciprocal standard deviation.
pub(crate) fn normalize_row(row: &mut [f64]) -> f64 {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    for v in row.iter_mut() {
        *v = (*v - mean) * rstd;
    }
    rstd
}

/// `C = alpha * op(A) * op(B) + beta * C` over contiguous row-major buffers.
///
/// `op(A)` is `m x k`; when `a_trans` is set, `a` holds the `k x m` matrix.
/// Likewise `op(B)` is `k x n` and `b` holds `n x k` when `b_trans` is set.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm buffer too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserted buffer lengths cover every index reachable with
    // the strides above; `c` does not alias `a` or `b` (distinct borrows).
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
