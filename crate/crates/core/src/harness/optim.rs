//! Adam with L2 weight decay and a per-epoch cosine schedule.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::Result;

/// `floor + (base − floor)·(1 + cos(π·e/(E−1)))/2`, reaching `floor` at the last epoch.
pub fn cosine_lr(base: f64, floor: f64, epoch: usize, epochs: usize) -> f64 {
    if epochs <= 1 {
        return base;
    }
    let t = epoch.min(epochs - 1) as f64 / (epochs - 1) as f64;
    floor + (base - floor) * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
}

struct Slot {
    var: Var,
    m: Tensor,
    v: Tensor,
}

/// Adam in which weight decay is added to the gradient before the moment updates.
pub struct Adam {
    slots: Vec<Slot>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: usize,
}

impl Adam {
    pub fn new(vars: Vec<Var>, lr: f64, weight_decay: f64) -> Result<Self> {
        let slots = vars
            .into_iter()
            .map(|var| {
                let z = var.as_tensor().zeros_like()?;
                Ok(Slot { m: z.clone(), v: z, var })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { slots, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0 })
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    /// Applies one update. Variables without a gradient are left untouched.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for s in &mut self.slots {
            let theta = s.var.as_tensor();
            let Some(g) = grads.get(theta) else { continue };
            let g = g.detach();
            let theta = theta.detach();
            let g = if self.weight_decay > 0.0 { (g + (&theta * self.weight_decay)?)? } else { g };
            s.m = ((&s.m * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            s.v = ((&s.v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let m_hat = (&s.m / bc1)?;
            let v_hat = (&s.v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
            s.var.set(&(theta - (update * self.lr)?)?)?;
        }
        Ok(())
    }
}
