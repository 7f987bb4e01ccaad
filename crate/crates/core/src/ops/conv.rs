use candle_core::{CpuStorage, CustomOp2, Layout, Shape, Tensor, WithDType};

use super::{contiguous_slice, dispatch_float, matmul_into, Float};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dParams {
    pub stride: usize,
    pub padding: usize,
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Self { stride: 1, padding: 0 }
    }
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn new(
        x: (usize, usize, usize, usize),
        w: (usize, usize, usize, usize),
        p: Conv2dParams,
    ) -> candle_core::Result<Self> {
        let (batch, cin, h, wi) = x;
        let (cout, wcin, kh, kw) = w;
        if cin != wcin {
            candle_core::bail!("conv2d: input has {cin} channels, kernel expects {wcin}");
        }
        if p.stride == 0 || h + 2 * p.padding < kh || wi + 2 * p.padding < kw {
            candle_core::bail!("conv2d: kernel {kh}x{kw} does not fit input {h}x{wi}");
        }
        Ok(Self {
            batch,
            cin,
            h,
            w: wi,
            cout,
            kh,
            kw,
            ho: (h + 2 * p.padding - kh) / p.stride + 1,
            wo: (wi + 2 * p.padding - kw) / p.stride + 1,
            stride: p.stride,
            pad: p.padding,
        })
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }

    fn in_pixels(&self) -> usize {
        self.h * self.w
    }
}

/// Output rows `[oy0, oy1)` of the unfolded input, laid out `[cin·kh·kw, rows·wo]`.
fn im2col<T: Float>(x: &[T], g: &Geometry, oy0: usize, oy1: usize, col: &mut [T]) {
    let n = (oy1 - oy0) * g.wo;
    for c in 0..g.cin {
        let plane = &x[c * g.in_pixels()..(c + 1) * g.in_pixels()];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * n;
                let dst = &mut col[row..row + n];
                for oy in oy0..oy1 {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let drow = &mut dst[(oy - oy0) * g.wo..(oy - oy0 + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let shift = kj as isize - g.pad as isize;
                        let lo = (-shift).clamp(0, g.wo as isize) as usize;
                        let hi = ((g.w as isize - shift).clamp(0, g.wo as isize)) as usize;
                        drow[..lo].fill(T::zero());
                        drow[hi..].fill(T::zero());
                        if hi > lo {
                            let s0 = (lo as isize + shift) as usize;
                            drow[lo..hi].copy_from_slice(&src[s0..s0 + hi - lo]);
                        }
                        continue;
                    }
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix >= 0 && ix < g.w as isize { src[ix as usize] } else { T::zero() };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`] for the same row range, accumulating into `dx`.
fn col2im<T: Float>(col: &[T], g: &Geometry, oy0: usize, oy1: usize, dx: &mut [T]) {
    let n = (oy1 - oy0) * g.wo;
    for c in 0..g.cin {
        let plane = &mut dx[c * g.in_pixels()..(c + 1) * g.in_pixels()];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * n;
                let srcrow = &col[row..row + n];
                for oy in oy0..oy1 {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in srcrow[(oy - oy0) * g.wo..(oy - oy0 + 1) * g.wo].iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += *v;
                        }
                    }
                }
            }
        }
    }
}

/// Column-buffer budget in elements; tiles of output rows are sized to fit,
/// but never narrower than `MIN_TILE_PIXELS` so the GEMMs stay efficient.
const TILE_ELEMS: usize = 1 << 17;
const MIN_TILE_PIXELS: usize = 256;

fn tile_rows(g: &Geometry) -> usize {
    let fit = TILE_ELEMS / (g.col_rows() * g.wo).max(1);
    fit.max(MIN_TILE_PIXELS.div_ceil(g.wo)).clamp(1, g.ho)
}

fn col_buffer<T: Float>(g: &Geometry) -> Vec<T> {
    let len = if g.pointwise() { 0 } else { g.col_rows() * tile_rows(g) * g.wo };
    vec![T::zero(); len]
}

fn row_tiles(g: &Geometry) -> impl Iterator<Item = (usize, usize)> {
    let rows = tile_rows(g);
    let ho = g.ho;
    (0..ho).step_by(rows).map(move |r| (r, (r + rows).min(ho)))
}

/// `c[m×n] (+)= a[m×k] · b[k×n]` where `c` has row stride `ldc` and `b` may be
/// transposed (stored `[n×k]`). `a` may be transposed too (stored `[k×m]`).
#[allow(clippy::too_many_arguments)]
fn gemm<T: Float>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    lda: usize,
    a_trans: bool,
    b: &[T],
    ldb: usize,
    b_trans: bool,
    c: &mut [T],
    ldc: usize,
    accumulate: bool,
) {
    let (rsa, csa) = if a_trans { (1, lda as isize) } else { (lda as isize, 1) };
    let (rsb, csb) = if b_trans { (1, ldb as isize) } else { (ldb as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    assert!(m == 0 || n == 0 || c.len() >= (m - 1) * ldc + n);
    unsafe {
        T::gemm(m, k, n, T::one(), a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), ldc as isize, 1)
    }
}

fn forward<T: Float>(x: &[T], w: &[T], g: &Geometry) -> Vec<T> {
    let (k, n) = (g.col_rows(), g.out_pixels());
    let mut out = vec![T::zero(); g.batch * g.cout * n];
    let mut col = col_buffer::<T>(g);
    for b in 0..g.batch {
        let xb = &x[b * g.cin * g.in_pixels()..(b + 1) * g.cin * g.in_pixels()];
        let ob = &mut out[b * g.cout * n..(b + 1) * g.cout * n];
        if g.pointwise() {
            matmul_into(g.cout, k, n, w, false, xb, false, ob, false);
            continue;
        }
        for (r0, r1) in row_tiles(g) {
            let nt = (r1 - r0) * g.wo;
            im2col(xb, g, r0, r1, &mut col);
            gemm(g.cout, k, nt, w, k, false, &col, nt, false, &mut ob[r0 * g.wo..], n, false);
        }
    }
    out
}

fn grad_input<T: Float>(dy: &[T], w: &[T], g: &Geometry) -> Vec<T> {
    let (k, n) = (g.col_rows(), g.out_pixels());
    let mut dx = vec![T::zero(); g.batch * g.cin * g.in_pixels()];
    let mut col = col_buffer::<T>(g);
    // Packing a transposed operand is slow in the GEMM; transpose the
    // (small) weight once instead.
    let mut wt = vec![T::zero(); w.len()];
    for o in 0..g.cout {
        for r in 0..k {
            wt[r * g.cout + o] = w[o * k + r];
        }
    }
    for b in 0..g.batch {
        let dyb = &dy[b * g.cout * n..(b + 1) * g.cout * n];
        let dxb = &mut dx[b * g.cin * g.in_pixels()..(b + 1) * g.cin * g.in_pixels()];
        if g.pointwise() {
            matmul_into(k, g.cout, n, &wt, false, dyb, false, dxb, false);
            continue;
        }
        for (r0, r1) in row_tiles(g) {
            let nt = (r1 - r0) * g.wo;
            gemm(k, g.cout, nt, &wt, g.cout, false, &dyb[r0 * g.wo..], n, false, &mut col, nt, false);
            col2im(&col, g, r0, r1, dxb);
        }
    }
    dx
}

fn grad_weight<T: Float>(x: &[T], dy: &[T], g: &Geometry) -> Vec<T> {
    let (k, n) = (g.col_rows(), g.out_pixels());
    let mut dw = vec![T::zero(); g.cout * k];
    let mut col = col_buffer::<T>(g);
    for b in 0..g.batch {
        let xb = &x[b * g.cin * g.in_pixels()..(b + 1) * g.cin * g.in_pixels()];
        let dyb = &dy[b * g.cout * n..(b + 1) * g.cout * n];
        if g.pointwise() {
            matmul_into(g.cout, n, k, dyb, false, xb, true, &mut dw, true);
            continue;
        }
        for (r0, r1) in row_tiles(g) {
            let nt = (r1 - r0) * g.wo;
            im2col(xb, g, r0, r1, &mut col);
            gemm(g.cout, nt, k, &dyb[r0 * g.wo..], n, false, &col, nt, true, &mut dw, k, true);
        }
    }
    dw
}

struct ConvForward(Conv2dParams);

impl CustomOp2 for ConvForward {
    fn name(&self) -> &'static str {
        "conv2d-gemm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = Geometry::new(l1.shape().dims4()?, l2.shape().dims4()?, self.0)?;
        let shape = Shape::from((g.batch, g.cout, g.ho, g.wo));
        dispatch_float!(s1, "conv2d", |T| {
            let x = contiguous_slice::<T>(s1, l1)?;
            let w = contiguous_slice::<T>(s2, l2)?;
            Ok((T::to_cpu_storage_owned(forward(x, w, &g)), shape))
        })
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let (_, _, h, wi) = x.dims4()?;
        let (_, _, kh, kw) = w.dims4()?;
        let dx = if x.track_op() {
            Some(grad.apply_op2_no_bwd(w, &ConvGradInput { params: self.0, h, w: wi })?)
        } else {
            None
        };
        let dw = if w.track_op() {
            Some(x.apply_op2_no_bwd(&grad, &ConvGradWeight { params: self.0, kh, kw })?)
        } else {
            None
        };
        Ok((dx, dw))
    }
}

struct ConvGradInput {
    params: Conv2dParams,
    h: usize,
    w: usize,
}

impl CustomOp2 for ConvGradInput {
    fn name(&self) -> &'static str {
        "conv2d-gemm-grad-input"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (batch, _, _, _) = l1.shape().dims4()?;
        let wdims = l2.shape().dims4()?;
        let g = Geometry::new((batch, wdims.1, self.h, self.w), wdims, self.params)?;
        let shape = Shape::from((g.batch, g.cin, g.h, g.w));
        dispatch_float!(s1, "conv2d-grad-input", |T| {
            let dy = contiguous_slice::<T>(s1, l1)?;
            let w = contiguous_slice::<T>(s2, l2)?;
            Ok((T::to_cpu_storage_owned(grad_input(dy, w, &g)), shape))
        })
    }
}

struct ConvGradWeight {
    params: Conv2dParams,
    kh: usize,
    kw: usize,
}

impl CustomOp2 for ConvGradWeight {
    fn name(&self) -> &'static str {
        "conv2d-gemm-grad-weight"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let xdims = l1.shape().dims4()?;
        let (_, cout, _, _) = l2.shape().dims4()?;
        let g = Geometry::new(xdims, (cout, xdims.1, self.kh, self.kw), self.params)?;
        let shape = Shape::from((g.cout, g.cin, g.kh, g.kw));
        dispatch_float!(s1, "conv2d-grad-weight", |T| {
            let x = contiguous_slice::<T>(s1, l1)?;
            let dy = contiguous_slice::<T>(s2, l2)?;
            Ok((T::to_cpu_storage_owned(grad_weight(x, dy, &g)), shape))
        })
    }
}

/// 2-D cross-correlation of `x: [B, Cin, H, W]` with `w: [Cout, Cin, kh, kw]`.
pub fn conv2d(x: &Tensor, w: &Tensor, params: Conv2dParams) -> candle_core::Result<Tensor> {
    let x = x.contiguous()?;
    let w = w.contiguous()?;
    x.apply_op2(&w, ConvForward(params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    fn naive(x: &[f64], w: &[f64], g: &Geometry) -> Vec<f64> {
        let mut out = vec![0.0; g.batch * g.cout * g.ho * g.wo];
        for b in 0..g.batch {
            for o in 0..g.cout {
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        let mut acc = 0.0;
                        for c in 0..g.cin {
                            for ki in 0..g.kh {
                                for kj in 0..g.kw {
                                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                        continue;
                                    }
                                    acc += x[((b * g.cin + c) * g.h + iy as usize) * g.w + ix as usize]
                                        * w[((o * g.cin + c) * g.kh + ki) * g.kw + kj];
                                }
                            }
                        }
                        out[((b * g.cout + o) * g.ho + oy) * g.wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_direct_summation() -> candle_core::Result<()> {
        let dev = Device::Cpu;
        for &(k, stride, pad) in &[(3usize, 1usize, 1usize), (3, 2, 1), (1, 1, 0), (7, 2, 3), (1, 2, 0)] {
            let x = Tensor::randn(0f64, 1.0, (2, 3, 9, 8), &dev)?;
            let w = Tensor::randn(0f64, 1.0, (4, 3, k, k), &dev)?;
            let p = Conv2dParams { stride, padding: pad };
            let y = conv2d(&x, &w, p)?;
            let g = Geometry::new(x.dims4()?, w.dims4()?, p)?;
            let expect = naive(&x.flatten_all()?.to_vec1()?, &w.flatten_all()?.to_vec1()?, &g);
            let got: Vec<f64> = y.flatten_all()?.to_vec1()?;
            assert_eq!(y.dims4()?, (2, 4, g.ho, g.wo));
            for (a, b) in got.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-10, "k={k} s={stride}: {a} vs {b}");
            }
        }
        Ok(())
    }

    #[test]
    fn gradients_match_finite_differences() -> candle_core::Result<()> {
        let dev = Device::Cpu;
        for &(k, stride, pad) in &[(3usize, 1usize, 1usize), (3, 2, 1), (1, 1, 0)] {
            let x = Var::randn(0f64, 1.0, (2, 2, 5, 6), &dev)?;
            let w = Var::randn(0f64, 1.0, (3, 2, k, k), &dev)?;
            let p = Conv2dParams { stride, padding: pad };
            let probe = Tensor::randn(0f64, 1.0, conv2d(&x, &w, p)?.shape(), &dev)?;
            let loss = |x: &Tensor, w: &Tensor| -> candle_core::Result<f64> {
                conv2d(x, w, p)?.mul(&probe)?.sum_all()?.to_scalar::<f64>()
            };
            let grads = conv2d(&x, &w, p)?.mul(&probe)?.sum_all()?.backward()?;
            for var in [&x, &w] {
                let analytic: Vec<f64> = grads.get(var).unwrap().flatten_all()?.to_vec1()?;
                let base: Vec<f64> = var.flatten_all()?.to_vec1()?;
                for i in (0..base.len()).step_by(3) {
                    let mut plus = base.clone();
                    plus[i] += 1e-5;
                    let mut minus = base.clone();
                    minus[i] -= 1e-5;
                    let tp = Tensor::from_vec(plus, var.shape(), &dev)?;
                    let tm = Tensor::from_vec(minus, var.shape(), &dev)?;
                    let (fp, fm) = if std::ptr::eq(var, &x) {
                        (loss(&tp, &w)?, loss(&tm, &w)?)
                    } else {
                        (loss(&x, &tp)?, loss(&x, &tm)?)
                    };
                    let fd = (fp - fm) / 2e-5;
                    assert!((fd - analytic[i]).abs() < 1e-6 * (1.0 + fd.abs()), "{fd} vs {}", analytic[i]);
                }
            }
        }
        Ok(())
    }

    #[test]
    fn runs_in_single_precision() -> candle_core::Result<()> {
        let x = Tensor::ones((1, 2, 4, 4), DType::F32, &Device::Cpu)?;
        let w = Tensor::ones((1, 2, 3, 3), DType::F32, &Device::Cpu)?;
        let y = conv2d(&x, &w, Conv2dParams { stride: 1, padding: 1 })?;
        let v: Vec<f32> = y.flatten_all()?.to_vec1()?;
        assert_eq!(v[0], 8.0);
        assert_eq!(v[5], 18.0);
        Ok(())
    }
}
