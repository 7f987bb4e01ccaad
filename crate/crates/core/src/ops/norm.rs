use candle_core::{CpuStorage, CustomOp3, Device, Layout, Shape, Tensor, WithDType};

use super::{contiguous_slice, dispatch_dtype, dispatch_float, tensor_vec, Float};

struct GroupNorm {
    groups: usize,
    eps: f64,
}

struct Dims {
    batch: usize,
    channels: usize,
    pixels: usize,
    groups: usize,
}

impl Dims {
    fn of(shape: &Shape, groups: usize) -> candle_core::Result<Self> {
        let (batch, channels, h, w) = shape.dims4()?;
        if groups == 0 || channels % groups != 0 {
            candle_core::bail!("group_norm: {channels} channels not divisible into {groups} groups");
        }
        Ok(Self { batch, channels, pixels: h * w, groups })
    }

    fn group_len(&self) -> usize {
        self.channels / self.groups * self.pixels
    }
}

/// Per (batch, group) mean and reciprocal standard deviation.
fn statistics<T: Float>(x: &[T], d: &Dims, eps: f64) -> Vec<(T, T)> {
    let n = d.group_len();
    x.chunks(n)
        .map(|chunk| {
            let mean = chunk.iter().map(|v| v.to_f64().unwrap()).sum::<f64>() / n as f64;
            let var = chunk
                .iter()
                .map(|v| {
                    let c = v.to_f64().unwrap() - mean;
                    c * c
                })
                .sum::<f64>()
                / n as f64;
            (T::of(mean), T::of(1.0 / (var + eps).sqrt()))
        })
        .collect()
}

fn forward<T: Float>(x: &[T], gamma: &[T], beta: &[T], d: &Dims, eps: f64) -> Vec<T> {
    let stats = statistics(x, d, eps);
    let cpg = d.channels / d.groups;
    let mut out = vec![T::zero(); x.len()];
    for b in 0..d.batch {
        for c in 0..d.channels {
            let (mean, rstd) = stats[b * d.groups + c / cpg];
            let scale = gamma[c] * rstd;
            let shift = beta[c] - mean * scale;
            let base = (b * d.channels + c) * d.pixels;
            for (o, v) in out[base..base + d.pixels].iter_mut().zip(&x[base..base + d.pixels]) {
                *o = *v * scale + shift;
            }
        }
    }
    out
}

fn backward<T: Float>(
    x: &[T],
    gamma: &[T],
    dy: &[T],
    d: &Dims,
    eps: f64,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let stats = statistics(x, d, eps);
    let cpg = d.channels / d.groups;
    let n = T::of(d.group_len() as f64);
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); d.channels];
    let mut dbeta = vec![T::zero(); d.channels];
    for b in 0..d.batch {
        for g in 0..d.groups {
            let (mean, rstd) = stats[b * d.groups + g];
            // Sums of dy·γ and dy·γ·x̂ over the group.
            let (mut s1, mut s2) = (T::zero(), T::zero());
            for c in g * cpg..(g + 1) * cpg {
                let base = (b * d.channels + c) * d.pixels;
                let (mut dg, mut db) = (T::zero(), T::zero());
                for i in base..base + d.pixels {
                    let xhat = (x[i] - mean) * rstd;
                    dg += dy[i] * xhat;
                    db += dy[i];
                }
                dgamma[c] += dg;
                dbeta[c] += db;
                s1 += db * gamma[c];
                s2 += dg * gamma[c];
            }
            let (m1, m2) = (s1 / n, s2 / n);
            for c in g * cpg..(g + 1) * cpg {
                let base = (b * d.channels + c) * d.pixels;
                for i in base..base + d.pixels {
                    let xhat = (x[i] - mean) * rstd;
                    dx[i] = rstd * (dy[i] * gamma[c] - m1 - xhat * m2);
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

impl CustomOp3 for GroupNorm {
    fn name(&self) -> &'static str {
        "group-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = Dims::of(l1.shape(), self.groups)?;
        if l2.shape().elem_count() != d.channels || l3.shape().elem_count() != d.channels {
            candle_core::bail!("group_norm: affine parameters must have {} entries", d.channels);
        }
        dispatch_float!(s1, "group_norm", |T| {
            let x = contiguous_slice::<T>(s1, l1)?;
            let gamma = contiguous_slice::<T>(s2, l2)?;
            let beta = contiguous_slice::<T>(s3, l3)?;
            let out = forward(x, gamma, beta, &d, self.eps);
            Ok((T::to_cpu_storage_owned(out), l1.shape().clone()))
        })
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let d = Dims::of(x.shape(), self.groups)?;
        let dev = Device::Cpu;
        dispatch_dtype!(x.dtype(), "group_norm", |T| {
            let (dx, dg, db) = backward::<T>(
                &tensor_vec(x)?,
                &tensor_vec(gamma)?,
                &tensor_vec(grad)?,
                &d,
                self.eps,
            );
            Ok((
                Some(Tensor::from_vec(dx, x.shape(), &dev)?),
                Some(Tensor::from_vec(dg, gamma.shape(), &dev)?),
                Some(Tensor::from_vec(db, gamma.shape(), &dev)?),
            ))
        })
    }
}

/// Group normalization over `[B, C, H, W]` with per-channel affine `gamma`, `beta` (`[C]`).
pub fn group_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    groups: usize,
    eps: f64,
) -> candle_core::Result<Tensor> {
    let x = x.contiguous()?;
    x.apply_op3(&gamma.contiguous()?, &beta.contiguous()?, GroupNorm { groups, eps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Var;

    #[test]
    fn normalizes_each_group() -> candle_core::Result<()> {
        let dev = Device::Cpu;
        let x = (Tensor::randn(0f64, 3.0, (2, 4, 3, 3), &dev)? + 5.0)?;
        let y = group_norm(&x, &Tensor::ones(4, candle_core::DType::F64, &dev)?, &Tensor::zeros(4, candle_core::DType::F64, &dev)?, 2, 1e-5)?;
        let grouped = y.reshape((2, 2, 18))?;
        let mean: Vec<f64> = grouped.mean(2)?.flatten_all()?.to_vec1()?;
        let var: Vec<f64> = grouped.sqr()?.mean(2)?.flatten_all()?.to_vec1()?;
        for (m, v) in mean.iter().zip(&var) {
            assert!(m.abs() < 1e-10);
            assert!((v - 1.0).abs() < 1e-3);
        }
        Ok(())
    }

    #[test]
    fn gradients_match_finite_differences() -> candle_core::Result<()> {
        let dev = Device::Cpu;
        let x = Var::randn(0f64, 1.0, (2, 4, 3, 2), &dev)?;
        let gamma = Var::randn(1f64, 0.5, 4, &dev)?;
        let beta = Var::randn(0f64, 0.5, 4, &dev)?;
        let probe = Tensor::randn(0f64, 1.0, (2, 4, 3, 2), &dev)?;
        let f = |x: &Tensor, g: &Tensor, b: &Tensor| -> candle_core::Result<f64> {
            group_norm(x, g, b, 2, 1e-5)?.mul(&probe)?.sum_all()?.to_scalar()
        };
        let grads = group_norm(&x, &gamma, &beta, 2, 1e-5)?.mul(&probe)?.sum_all()?.backward()?;
        let vars = [x.as_tensor().clone(), gamma.as_tensor().clone(), beta.as_tensor().clone()];
        for which in 0..3 {
            let analytic: Vec<f64> = tensor_vec(grads.get(&vars[which]).unwrap())?;
            let base: Vec<f64> = tensor_vec(&vars[which])?;
            for i in 0..base.len() {
                let eval = |delta: f64| -> candle_core::Result<f64> {
                    let mut v = base.clone();
                    v[i] += delta;
                    let mut args = vars.clone();
                    args[which] = Tensor::from_vec(v, vars[which].shape(), &dev)?;
                    f(&args[0], &args[1], &args[2])
                };
                let fd = (eval(1e-6)? - eval(-1e-6)?) / 2e-6;
                assert!((fd - analytic[i]).abs() < 1e-6 * (1.0 + fd.abs()), "arg {which}[{i}]: {fd} vs {}", analytic[i]);
            }
        }
        Ok(())
    }
}
