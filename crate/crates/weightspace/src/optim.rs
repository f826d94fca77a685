//! AdamW with decoupled weight decay, and a one-cycle learning-rate schedule
//! (linear warmup to the peak, cosine decay to the floor).

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub struct AdamW<T: Scalar> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub weight_decay: T,
    t: i32,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(lr: T, betas: (T, T), eps: T, weight_decay: T) -> Self {
        Self {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update over matched (param, grad) pairs. State buffers are
    /// lazily initialized to zeros on the first call.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Argument(format!(
                "{} params but {} grads",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.v = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        self.t += 1;
        let bc1 = T::one() - self.beta1.powi(self.t);
        let bc2 = T::one() - self.beta2.powi(self.t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if p.shape() != g.shape() {
                return Err(Error::Dimension(format!(
                    "param shape {:?} vs grad shape {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            let pd = p.data_mut();
            let (gd, md, vd) = (g.data(), m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                md[i] = self.beta1 * md[i] + (T::one() - self.beta1) * gd[i];
                vd[i] = self.beta2 * vd[i] + (T::one() - self.beta2) * gd[i] * gd[i];
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                // decoupled weight decay
                pd[i] = pd[i] - self.lr * self.weight_decay * pd[i];
                pd[i] = pd[i] - self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// One-cycle schedule: linear ramp from `lr_max/div` to `lr_max` over
/// `pct_start · total_steps`, then cosine decay to `lr_max/final_div`.
pub fn onecycle_lr<T: Scalar>(
    step: usize,
    total_steps: usize,
    lr_max: T,
    pct_start: f64,
    div: T,
    final_div: T,
) -> Result<T> {
    if step > total_steps {
        return Err(Error::Argument(format!(
            "step {step} past total_steps {total_steps}"
        )));
    }
    let lr_start = lr_max / div;
    let lr_final = lr_max / final_div;
    let warm = (pct_start * total_steps as f64).round() as usize;
    if step <= warm {
        if warm == 0 {
            return Ok(lr_max);
        }
        let frac = T::from_f64(step as f64 / warm as f64);
        Ok(lr_start + (lr_max - lr_start) * frac)
    } else {
        let progress = (step - warm) as f64 / (total_steps - warm) as f64;
        let cos = T::from_f64(0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
        Ok(lr_final + (lr_max - lr_final) * cos)
    }
}
