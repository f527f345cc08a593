//! Graph-free forward kernels. The autodiff tape and the cached inference
//! path both call into these so the two stay numerically identical.

use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

/// Shape of `op(x)` where `op` is transpose when `t` is set.
fn op_dims<T: Scalar>(x: &Tensor<T>, t: bool) -> (usize, usize) {
    if t {
        (x.cols(), x.rows())
    } else {
        (x.rows(), x.cols())
    }
}

fn strides(cols: usize, t: bool) -> (isize, isize) {
    if t {
        (1, cols as isize)
    } else {
        (cols as isize, 1)
    }
}

/// `op(a) · op(b)`, with `op` selected by the transpose flags.
pub fn matmul<T: Scalar>(a: &Tensor<T>, ta: bool, b: &Tensor<T>, tb: bool) -> Result<Tensor<T>> {
    let (m, k) = op_dims(a, ta);
    let (k2, n) = op_dims(b, tb);
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = Tensor::zeros(&[m, n]);
    matmul_acc(a, ta, b, tb, T::one(), &mut out);
    Ok(out)
}

/// `out += alpha · op(a) · op(b)`; shapes must already agree.
pub(crate) fn matmul_acc<T: Scalar>(
    a: &Tensor<T>,
    ta: bool,
    b: &Tensor<T>,
    tb: bool,
    alpha: T,
    out: &mut Tensor<T>,
) {
    let (m, k) = op_dims(a, ta);
    let (_, n) = op_dims(b, tb);
    let (rsa, csa) = strides(a.cols(), ta);
    let (rsb, csb) = strides(b.cols(), tb);
    T::gemm(
        m,
        k,
        n,
        alpha,
        a.data(),
        rsa,
        csa,
        b.data(),
        rsb,
        csb,
        T::one(),
        out.data_mut(),
        n as isize,
        1,
    );
}

/// Raw-slice matrix product used by the inference path:
/// `out[m×n] = a[m×k] · b[k×n]` (or `bᵀ` when `tb`, with `b` stored `n×k`).
pub fn matmul_slices<T: Scalar>(
    a: &[T],
    m: usize,
    k: usize,
    b: &[T],
    n: usize,
    tb: bool,
    out: &mut [T],
) {
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a,
        k as isize,
        1,
        b,
        rsb,
        csb,
        T::zero(),
        out,
        n as isize,
        1,
    );
}

/// In-place numerically stable softmax over one row.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    let rows = out.rows();
    for r in 0..rows {
        softmax_in_place(out.row_mut(r));
    }
    out
}

/// `log Σ exp(row)` with max subtraction.
pub fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let total: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + total.ln()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let inner = c * (x + a * x * x * x);
    half * x * (T::one() + inner.tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let three = T::of(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * a * x * x)
}

/// Per-row normalization statistics kept for the backward pass.
pub struct LayerNormOut<T> {
    pub y: Tensor<T>,
    pub xhat: Tensor<T>,
    pub rstd: Vec<T>,
}

/// Row-wise layer normalization with affine `gamma`, `beta` of length `cols`.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> Result<LayerNormOut<T>> {
    let c = x.cols();
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape("layer_norm", x.shape(), &[gamma.len()]));
    }
    let rows = x.rows();
    let mut y = Tensor::zeros(x.shape());
    let mut xhat = Tensor::zeros(x.shape());
    let mut rstd = Vec::with_capacity(rows);
    let n = T::of(c as f64);
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rs = T::one() / (var + eps).sqrt();
        rstd.push(rs);
        let xh = xhat.row_mut(r);
        for (o, &v) in xh.iter_mut().zip(row) {
            *o = (v - mean) * rs;
        }
        let xh = xhat.row(r).to_vec();
        for ((o, &h), (&g, &b)) in y.row_mut(r).iter_mut().zip(&xh).zip(gamma.iter().zip(beta)) {
            *o = h * g + b;
        }
    }
    Ok(LayerNormOut { y, xhat, rstd })
}

/// Adds `bias` to every row of `x` in place.
pub fn add_row_in_place<T: Scalar>(x: &mut Tensor<T>, bias: &[T]) {
    let rows = x.rows();
    for r in 0..rows {
        for (o, &b) in x.row_mut(r).iter_mut().zip(bias) {
            *o += b;
        }
    }
}
