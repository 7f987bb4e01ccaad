use candle_core::{CpuStorage, CustomOp1, Device, Layout, Shape, Tensor, WithDType};

use super::{contiguous_slice, dispatch_dtype, dispatch_float, tensor_vec, Float};

/// Half-pixel-centre interpolation taps along one axis.
fn taps(input: usize, output: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let frac = src - i0 as f64;
            (i0, i1, 1.0 - frac, frac)
        })
        .collect()
}

struct Bilinear {
    out_h: usize,
    out_w: usize,
}

impl Bilinear {
    fn forward<T: Float>(&self, x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
        let ty = taps(h, self.out_h);
        let tx = taps(w, self.out_w);
        let mut out = vec![T::zero(); planes * self.out_h * self.out_w];
        for p in 0..planes {
            let plane = &x[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * self.out_h * self.out_w..(p + 1) * self.out_h * self.out_w];
            for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                let (wy0, wy1) = (T::of(wy0), T::of(wy1));
                for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                    let (wx0, wx1) = (T::of(wx0), T::of(wx1));
                    let top = plane[y0 * w + x0] * wx0 + plane[y0 * w + x1] * wx1;
                    let bottom = plane[y1 * w + x0] * wx0 + plane[y1 * w + x1] * wx1;
                    dst[oy * self.out_w + ox] = top * wy0 + bottom * wy1;
                }
            }
        }
        out
    }

    fn backward<T: Float>(&self, dy: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
        let ty = taps(h, self.out_h);
        let tx = taps(w, self.out_w);
        let mut dx = vec![T::zero(); planes * h * w];
        for p in 0..planes {
            let plane = &mut dx[p * h * w..(p + 1) * h * w];
            let src = &dy[p * self.out_h * self.out_w..(p + 1) * self.out_h * self.out_w];
            for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                    let g = src[oy * self.out_w + ox];
                    let (wy0, wy1, wx0, wx1) = (T::of(wy0), T::of(wy1), T::of(wx0), T::of(wx1));
                    plane[y0 * w + x0] += g * wy0 * wx0;
                    plane[y0 * w + x1] += g * wy0 * wx1;
                    plane[y1 * w + x0] += g * wy1 * wx0;
                    plane[y1 * w + x1] += g * wy1 * wx1;
                }
            }
        }
        dx
    }
}

impl CustomOp1 for Bilinear {
    fn name(&self) -> &'static str {
        "resize-bilinear"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = l.shape().dims4()?;
        dispatch_float!(s, "resize_bilinear", |T| {
            let x = contiguous_slice::<T>(s, l)?;
            let out = self.forward(x, b * c, h, w);
            Ok((T::to_cpu_storage_owned(out), Shape::from((b, c, self.out_h, self.out_w))))
        })
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (b, c, h, w) = arg.dims4()?;
        dispatch_dtype!(arg.dtype(), "resize_bilinear", |T| {
            let dx = self.backward::<T>(&tensor_vec(grad)?, b * c, h, w);
            Ok(Some(Tensor::from_vec(dx, arg.shape(), &Device::Cpu)?))
        })
    }
}

/// Bilinear resampling of `[B, C, H, W]` to `[B, C, out_h, out_w]` with
/// half-pixel centres (the `align_corners = false` convention).
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> candle_core::Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h == out_h && w == out_w {
        return Ok(x.clone());
    }
    x.contiguous()?.apply_op1(Bilinear { out_h, out_w })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Var;

    #[test]
    fn constant_stays_constant() -> candle_core::Result<()> {
        let x = (Tensor::ones((1, 1, 3, 5), candle_core::DType::F64, &Device::Cpu)? * 2.5)?;
        let y = resize_bilinear(&x, 12, 7)?;
        for v in tensor_vec::<f64>(&y)? {
            assert!((v - 2.5).abs() < 1e-12);
        }
        Ok(())
    }

    #[test]
    fn doubling_matches_reference_weights() -> candle_core::Result<()> {
        // 1-D ramp [0, 1]: half-pixel upsampling to 4 gives [0, .25, .75, 1].
        let x = Tensor::new(&[0f64, 1.0], &Device::Cpu)?.reshape((1, 1, 1, 2))?;
        let y = resize_bilinear(&x, 1, 4)?;
        assert_eq!(tensor_vec::<f64>(&y)?, vec![0.0, 0.25, 0.75, 1.0]);
        Ok(())
    }

    #[test]
    fn gradient_is_adjoint() -> candle_core::Result<()> {
        let dev = Device::Cpu;
        let x = Var::randn(0f64, 1.0, (1, 2, 3, 4), &dev)?;
        let probe = Tensor::randn(0f64, 1.0, (1, 2, 7, 5), &dev)?;
        let grads = resize_bilinear(&x, 7, 5)?.mul(&probe)?.sum_all()?.backward()?;
        let g: Vec<f64> = tensor_vec(grads.get(&x).unwrap())?;
        let base: Vec<f64> = tensor_vec(&x)?;
        for i in 0..base.len() {
            let mut v = base.clone();
            v[i] += 1.0;
            let bumped = Tensor::from_vec(v, (1, 2, 3, 4), &dev)?;
            let diff = (resize_bilinear(&bumped, 7, 5)? - resize_bilinear(&x, 7, 5)?)?;
            let fd: f64 = diff.mul(&probe)?.sum_all()?.to_scalar()?;
            assert!((fd - g[i]).abs() < 1e-10);
        }
        Ok(())
    }
}
