//! CPU tensor kernels with hand-written backward passes.
//!
//! candle's generic convolution backward lowers the weight gradient to a
//! convolution with an image-sized kernel, which is far too slow for training
//! a residual encoder on a CPU. These kernels go through im2col + GEMM in both
//! directions instead. All of them accept `f32` and `f64` so that gradient
//! checks can run in double precision.

mod bce;
mod conv;
mod norm;
mod pool;
mod resize;

pub use bce::bce_with_logits;
pub use conv::{conv2d, Conv2dParams};
pub use norm::group_norm;
pub use pool::{avg_pool_same, max_pool2d};
pub use resize::resize_bilinear;

use candle_core::{CpuStorage, DType, Layout, Tensor, WithDType};

pub(crate) trait Float: WithDType + num_traits::Float + std::iter::Sum + Send + Sync {
    /// `c = alpha * a · b + beta * c` with arbitrary row/column strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn of(v: f64) -> Self;
}

impl Float for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn of(v: f64) -> f32 {
        v as f32
    }
}

impl Float for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn of(v: f64) -> f64 {
        v
    }
}

/// Row-major `c[m×n] (+)= a[m×k] · b[k×n]`, with optional transposes of `a`/`b`
/// expressed as the logical shapes above.
pub(crate) fn matmul_into<T: Float>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_trans: bool,
    b: &[T],
    b_trans: bool,
    c: &mut [T],
    accumulate: bool,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
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
        )
    }
}

pub(crate) fn contiguous_slice<'a, T: WithDType>(
    storage: &'a CpuStorage,
    layout: &Layout,
) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&storage.as_slice::<T>()?[start..end]),
        None => candle_core::bail!("kernel input must be contiguous"),
    }
}

/// Copies a tensor's elements out in row-major order.
pub(crate) fn tensor_vec<T: WithDType>(t: &Tensor) -> candle_core::Result<Vec<T>> {
    t.flatten_all()?.to_vec1::<T>()
}

pub(crate) fn unsupported(name: &str, dtype: DType) -> candle_core::Error {
    candle_core::Error::Msg(format!("{name}: unsupported dtype {dtype:?}"))
}

macro_rules! dispatch_float {
    ($storage:expr, $name:expr, |$t:ident| $body:expr) => {
        match $storage {
            candle_core::CpuStorage::F32(_) => {
                type $t = f32;
                $body
            }
            candle_core::CpuStorage::F64(_) => {
                type $t = f64;
                $body
            }
            other => Err($crate::ops::unsupported($name, candle_core::backend::BackendStorage::dtype(other))),
        }
    };
}

macro_rules! dispatch_dtype {
    ($dtype:expr, $name:expr, |$t:ident| $body:expr) => {
        match $dtype {
            candle_core::DType::F32 => {
                type $t = f32;
                $body
            }
            candle_core::DType::F64 => {
                type $t = f64;
                $body
            }
            other => Err($crate::ops::unsupported($name, other)),
        }
    };
}

pub(crate) use dispatch_dtype;
pub(crate) use dispatch_float;
