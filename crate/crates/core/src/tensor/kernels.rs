//! Loop kernels shared by the forward and backward passes.

use super::Element;

/// Row-major `m x k` operand, optionally stored transposed (`k x m`).
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    pub data: &'a [T],
    pub transposed: bool,
}

impl<'a, T> MatRef<'a, T> {
    pub fn plain(data: &'a [T]) -> Self {
        MatRef {
            data,
            transposed: false,
        }
    }

    pub fn t(data: &'a [T]) -> Self {
        MatRef {
            data,
            transposed: true,
        }
    }

    fn strides(&self, rows: usize, cols: usize) -> (isize, isize) {
        if self.transposed {
            (1, rows as isize)
        } else {
            (cols as isize, 1)
        }
    }
}

/// `c (+)= a * b` for an `m x k` by `k x n` product.
pub(crate) fn gemm<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: MatRef<'_, T>,
    b: MatRef<'_, T>,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.data.len() >= m * k && b.data.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { T::one() } else { T::zero() };
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|x| *x = T::zero());
        }
        return;
    }
    let (rsa, csa) = a.strides(m, k);
    let (rsb, csb) = b.strides(k, n);
    // SAFETY: the asserts above bound every access made through the strides.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Swaps axes `d0 < d1` of a row-major buffer.
pub(crate) fn swap_axes<T: Copy>(src: &[T], shape: &[usize], d0: usize, d1: usize) -> Vec<T> {
    debug_assert!(d0 < d1 && d1 < shape.len());
    let outer: usize = shape[..d0].iter().product();
    let a = shape[d0];
    let mid: usize = shape[d0 + 1..d1].iter().product();
    let b = shape[d1];
    let inner: usize = shape[d1 + 1..].iter().product();
    let mut out = Vec::with_capacity(src.len());
    // output layout: [outer, b, mid, a, inner]
    for o in 0..outer {
        for j in 0..b {
            for md in 0..mid {
                for i in 0..a {
                    let base = (((o * a + i) * mid + md) * b + j) * inner;
                    out.extend_from_slice(&src[base..base + inner]);
                }
            }
        }
    }
    out
}

pub(crate) fn softmax_rows<T: Element>(src: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for (row, dst) in src.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
        let mut total = T::zero();
        for (d, &x) in dst.iter_mut().zip(row) {
            *d = (x - max).exp();
            total += *d;
        }
        let inv = T::one() / total;
        dst.iter_mut().for_each(|d| *d *= inv);
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub(crate) fn gelu<T: Element>(x: T) -> T {
    let c = T::cast(GELU_C);
    let a = T::cast(GELU_A);
    let half = T::cast(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<T: Element>(x: T) -> T {
    let c = T::cast(GELU_C);
    let a = T::cast(GELU_A);
    let half = T::cast(0.5);
    let th = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + th)
        + half * x * (T::one() - th * th) * c * (T::one() + T::cast(3.0) * a * x * x)
}
