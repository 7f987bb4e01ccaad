use candle_core::{CpuStorage, CustomOp2, Device, Layout, Shape, Tensor, WithDType};

use super::{contiguous_slice, dispatch_dtype, dispatch_float, tensor_vec, Float};

fn logistic<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

// max(z, 0) − t·z + log(1 + exp(−|z|))
fn bce<T: Float>(z: T, t: T) -> T {
    num_traits::Float::max(z, T::zero()) - t * z + (-z.abs()).exp().ln_1p()
}

struct BceWithLogits;

impl CustomOp2 for BceWithLogits {
    fn name(&self) -> &'static str {
        "bce-with-logits"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        dispatch_float!(s1, "bce_with_logits", |T| {
            let z = contiguous_slice::<T>(s1, l1)?;
            let t = contiguous_slice::<T>(s2, l2)?;
            let y: Vec<T> = z.iter().zip(t).map(|(&z, &t)| bce(z, t)).collect();
            Ok((T::to_cpu_storage_owned(y), l1.shape().clone()))
        })
    }

    fn bwd(
        &self,
        z: &Tensor,
        t: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        dispatch_dtype!(z.dtype(), "bce_with_logits", |T| {
            let zv = tensor_vec::<T>(z)?;
            let tv = tensor_vec::<T>(t)?;
            let g = tensor_vec::<T>(grad)?;
            let dz: Vec<T> = zv.iter().zip(&tv).zip(&g).map(|((&z, &t), &g)| g * (logistic(z) - t)).collect();
            Ok((Some(Tensor::from_vec(dz, z.shape(), &Device::Cpu)?), None))
        })
    }
}

/// Elementwise binary cross-entropy of `target` under `sigmoid(logits)`, in
/// the overflow-free form. No gradient flows to `target`.
pub fn bce_with_logits(logits: &Tensor, target: &Tensor) -> candle_core::Result<Tensor> {
    if logits.dims() != target.dims() {
        candle_core::bail!("bce_with_logits: {:?} vs {:?}", logits.dims(), target.dims());
    }
    let target = target.detach().to_dtype(logits.dtype())?;
    logits.contiguous()?.apply_op2(&target.contiguous()?, BceWithLogits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Var;

    #[test]
    fn values_and_gradient() -> candle_core::Result<()> {
        let z = [-30.0f64, -1.0, 0.0, 2.0, 20.0];
        let t = [0.0f64, 1.0, 1.0, 0.0, 1.0];
        let zv = Var::new(&z, &Device::Cpu)?;
        let y = bce_with_logits(zv.as_tensor(), &Tensor::new(&t, &Device::Cpu)?)?;
        let got = y.to_vec1::<f64>()?;
        for ((g, z), t) in got.iter().zip(z).zip(t) {
            // −log σ(z) = log(1 + e^−z), −log(1 − σ(z)) = log(1 + e^z)
            let expect = t * (-z).exp().ln_1p() + (1.0 - t) * z.exp().ln_1p();
            assert!((g - expect).abs() <= 1e-9 * expect.abs().max(1e-12), "{g} vs {expect}");
        }
        assert!((got[4] - (-20f64).exp().ln_1p()).abs() < 1e-22);
        let grads = y.sum_all()?.backward()?;
        let d = grads.get(zv.as_tensor()).unwrap().to_vec1::<f64>()?;
        assert_eq!(d[2], -0.5);
        Ok(())
    }
}
