use candle_core::{CpuStorage, CustomOp1, Device, Layout, Shape, Tensor, WithDType};

use super::{contiguous_slice, dispatch_dtype, dispatch_float, tensor_vec, Float};

#[derive(Clone, Copy)]
struct Window {
    kernel: usize,
    stride: usize,
    pad: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
}

impl Window {
    fn new(h: usize, w: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel,
            stride,
            pad,
            h,
            w,
            ho: (h + 2 * pad - kernel) / stride + 1,
            wo: (w + 2 * pad - kernel) / stride + 1,
        }
    }

    /// Clipped input range `[lo, hi)` covered by output index `o` along one axis.
    fn span(&self, o: usize, len: usize) -> (usize, usize) {
        let start = (o * self.stride) as isize - self.pad as isize;
        let lo = start.max(0) as usize;
        let hi = ((start + self.kernel as isize).max(0) as usize).min(len);
        (lo, hi)
    }
}

fn max_forward<T: Float>(x: &[T], planes: usize, win: &Window) -> Vec<T> {
    let mut out = vec![T::zero(); planes * win.ho * win.wo];
    for p in 0..planes {
        let plane = &x[p * win.h * win.w..(p + 1) * win.h * win.w];
        for oy in 0..win.ho {
            let (y0, y1) = win.span(oy, win.h);
            for ox in 0..win.wo {
                let (x0, x1) = win.span(ox, win.w);
                let mut best = T::neg_infinity();
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        let v = plane[iy * win.w + ix];
                        if v > best {
                            best = v;
                        }
                    }
                }
                out[(p * win.ho + oy) * win.wo + ox] = best;
            }
        }
    }
    out
}

fn max_backward<T: Float>(x: &[T], dy: &[T], planes: usize, win: &Window) -> Vec<T> {
    let mut dx = vec![T::zero(); x.len()];
    for p in 0..planes {
        let base = p * win.h * win.w;
        for oy in 0..win.ho {
            let (y0, y1) = win.span(oy, win.h);
            for ox in 0..win.wo {
                let (x0, x1) = win.span(ox, win.w);
                let mut best = T::neg_infinity();
                let mut arg = base + y0 * win.w + x0;
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        let v = x[base + iy * win.w + ix];
                        if v > best {
                            best = v;
                            arg = base + iy * win.w + ix;
                        }
                    }
                }
                dx[arg] += dy[(p * win.ho + oy) * win.wo + ox];
            }
        }
    }
    dx
}

struct MaxPool(usize, usize, usize);

impl CustomOp1 for MaxPool {
    fn name(&self) -> &'static str {
        "max-pool2d"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = l.shape().dims4()?;
        let win = Window::new(h, w, self.0, self.1, self.2);
        dispatch_float!(s, "max_pool2d", |T| {
            let x = contiguous_slice::<T>(s, l)?;
            Ok((T::to_cpu_storage_owned(max_forward(x, b * c, &win)), Shape::from((b, c, win.ho, win.wo))))
        })
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (b, c, h, w) = arg.dims4()?;
        let win = Window::new(h, w, self.0, self.1, self.2);
        dispatch_dtype!(arg.dtype(), "max_pool2d", |T| {
            let dx = max_backward::<T>(&tensor_vec(arg)?, &tensor_vec(grad)?, b * c, &win);
            Ok(Some(Tensor::from_vec(dx, arg.shape(), &Device::Cpu)?))
        })
    }
}

/// Max pooling with implicit `-inf` padding.
pub fn max_pool2d(x: &Tensor, kernel: usize, stride: usize, padding: usize) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(MaxPool(kernel, stride, padding))
}

fn avg_forward<T: Float>(x: &[T], planes: usize, win: &Window) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for p in 0..planes {
        let plane = &x[p * win.h * win.w..(p + 1) * win.h * win.w];
        for oy in 0..win.h {
            let (y0, y1) = win.span(oy, win.h);
            for ox in 0..win.w {
                let (x0, x1) = win.span(ox, win.w);
                let mut acc = T::zero();
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        acc += plane[iy * win.w + ix];
                    }
                }
                let count = T::of(((y1 - y0) * (x1 - x0)) as f64);
                out[(p * win.h + oy) * win.w + ox] = acc / count;
            }
        }
    }
    out
}

fn avg_backward<T: Float>(dy: &[T], planes: usize, win: &Window) -> Vec<T> {
    let mut dx = vec![T::zero(); dy.len()];
    for p in 0..planes {
        let base = p * win.h * win.w;
        for oy in 0..win.h {
            let (y0, y1) = win.span(oy, win.h);
            for ox in 0..win.w {
                let (x0, x1) = win.span(ox, win.w);
                let g = dy[base + oy * win.w + ox] / T::of(((y1 - y0) * (x1 - x0)) as f64);
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        dx[base + iy * win.w + ix] += g;
                    }
                }
            }
        }
    }
    dx
}

struct AvgPoolSame(usize);

impl CustomOp1 for AvgPoolSame {
    fn name(&self) -> &'static str {
        "avg-pool-same"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = l.shape().dims4()?;
        let win = Window::new(h, w, self.0, 1, self.0 / 2);
        dispatch_float!(s, "avg_pool_same", |T| {
            let x = contiguous_slice::<T>(s, l)?;
            Ok((T::to_cpu_storage_owned(avg_forward(x, b * c, &win)), l.shape().clone()))
        })
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (b, c, h, w) = arg.dims4()?;
        let win = Window::new(h, w, self.0, 1, self.0 / 2);
        dispatch_dtype!(arg.dtype(), "avg_pool_same", |T| {
            let dx = avg_backward::<T>(&tensor_vec(grad)?, b * c, &win);
            Ok(Some(Tensor::from_vec(dx, arg.shape(), &Device::Cpu)?))
        })
    }
}

/// Stride-1 average pooling over an odd `kernel`, output the same size as the input.
/// Border windows average only the pixels that fall inside the image, so a
/// spatially constant input passes through unchanged.
pub fn avg_pool_same(x: &Tensor, kernel: usize) -> candle_core::Result<Tensor> {
    if kernel.is_multiple_of(2) {
        candle_core::bail!("avg_pool_same: kernel must be odd, got {kernel}");
    }
    x.contiguous()?.apply_op1(AvgPoolSame(kernel))
}
