use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

/// Hyperparameters for [`AdamW`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moments and the step counter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimState {
    pub step: u64,
    pub first_moment: BTreeMap<String, Tensor>,
    pub second_moment: BTreeMap<String, Tensor>,
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub state: OptimState,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            state: OptimState::default(),
        }
    }

    /// Applies one update using the gradients held in `params` and learning rate `lr`.
    ///
    /// Weight decay is applied to the parameter directly (`θ ← θ − lr·wd·θ`),
    /// never folded into the gradient.
    pub fn step(&mut self, params: &mut ParamStore, lr: f64) -> Result<()> {
        if !(lr >= 0.0) {
            return Err(Error::invalid(format!("learning rate must be >= 0, got {lr}")));
        }
        for (name, g) in params.grads() {
            if g.data().iter().any(|v| v.is_nan()) {
                return Err(Error::NanGradient(name.to_string()));
            }
        }
        let AdamWConfig {
            weight_decay,
            beta1,
            beta2,
            eps,
            ..
        } = self.config;
        self.state.step += 1;
        let t = self.state.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);

        let names: Vec<String> = params.names().map(str::to_string).collect();
        for name in names {
            let grad = params.grad(&name)?.clone();
            let m = self
                .state
                .first_moment
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            if m.len() != grad.len() {
                return Err(Error::shape(format!("moment shape mismatch for `{name}`")));
            }
            let v = self
                .state
                .second_moment
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            let p = params.get_mut(&name)?;
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gv = gv as f64;
                let m_new = beta1 * *mv as f64 + (1.0 - beta1) * gv;
                let v_new = beta2 * *vv as f64 + (1.0 - beta2) * gv * gv;
                *mv = m_new as f32;
                *vv = v_new as f32;
                let m_hat = m_new / bc1;
                let v_hat = v_new / bc2;
                let theta = *pv as f64;
                let update = lr * weight_decay * theta + lr * m_hat / (v_hat.sqrt() + eps);
                *pv = (theta - update) as f32;
            }
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `peak_lr`, then linear decay to 0 at `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, peak_lr: f64, warmup_fraction: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::invalid("total_steps must be positive"));
    }
    if !(0.0..1.0).contains(&warmup_fraction) {
        return Err(Error::invalid(format!(
            "warmup_fraction must be in [0, 1), got {warmup_fraction}"
        )));
    }
    let step = step.min(total_steps);
    let warmup = if warmup_fraction > 0.0 {
        ((warmup_fraction * total_steps as f64).ceil() as usize).clamp(1, total_steps)
    } else {
        0
    };
    if step < warmup {
        return Ok(peak_lr * step as f64 / warmup as f64);
    }
    let remaining = (total_steps - warmup) as f64;
    if remaining == 0.0 {
        return Ok(peak_lr);
    }
    Ok(peak_lr * (total_steps - step) as f64 / remaining)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: Vec<f32>, grad: Vec<f32>) -> ParamStore {
        let mut s = ParamStore::new();
        let n = value.len();
        s.insert("w", Tensor::new(vec![n], value).unwrap()).unwrap();
        s.grad_mut("w").unwrap().data_mut().copy_from_slice(&grad);
        s
    }

    #[test]
    fn zero_gradient_only_decays() {
        let mut s = single(vec![2.0, -4.0], vec![0.0, 0.0]);
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        });
        opt.step(&mut s, 0.1).unwrap();
        let w = s.get("w").unwrap().data();
        assert!((w[0] - 2.0 * 0.95).abs() < 1e-6);
        assert!((w[1] + 4.0 * 0.95).abs() < 1e-6);
        assert_eq!(opt.state.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g|+eps) ≈ lr·sign(g)
        let mut s = single(vec![1.0, 1.0, 1.0], vec![0.3, -7.0, 1e-3]);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        opt.step(&mut s, 0.01).unwrap();
        let w = s.get("w").unwrap().data();
        assert!((w[0] - 0.99).abs() < 1e-6);
        assert!((w[1] - 1.01).abs() < 1e-6);
        assert!((w[2] - 0.99).abs() < 1e-5);
    }

    #[test]
    fn opposite_steps_return_near_start() {
        // Hand trace with β=(0.9,0.999), g then −g, wd=0:
        //   step1: m=0.1g, v=0.001g², m̂=g, v̂=g²      → Δ = −lr
        //   step2: m=0.09g−0.1g=−0.01g, m̂=−0.01g/0.19; v=0.001999g², v̂=g²·0.001999/0.001999
        //          → Δ = +lr·(0.01/0.19)
        let lr = 0.01f64;
        let mut s = single(vec![0.0], vec![1.0]);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        opt.step(&mut s, lr).unwrap();
        s.grad_mut("w").unwrap().data_mut()[0] = -1.0;
        opt.step(&mut s, lr).unwrap();
        let expected = -lr + lr * (0.01 / 0.19);
        let got = s.get("w").unwrap().data()[0] as f64;
        assert!((got - expected).abs() < 1e-7, "{got} vs {expected}");
    }

    #[test]
    fn zero_lr_is_bit_identical() {
        let mut s = single(vec![0.123_456_7, -9.87, 3.0e-8], vec![5.0, -1.0, 0.2]);
        let before = s.get("w").unwrap().clone();
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut s, 0.0).unwrap();
        assert_eq!(
            before.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            s.get("w").unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut s = single(vec![1.0], vec![f32::NAN]);
        let err = AdamW::new(AdamWConfig::default()).step(&mut s, 0.1).unwrap_err();
        assert!(err.to_string().contains("`w`"));
    }

    #[test]
    fn schedule_endpoints() {
        let total = 1000;
        assert_eq!(lr_schedule(0, total, 1e-3, 0.01).unwrap(), 0.0);
        assert!((lr_schedule(10, total, 1e-3, 0.01).unwrap() - 1e-3).abs() < 1e-15);
        assert_eq!(lr_schedule(total, total, 1e-3, 0.01).unwrap(), 0.0);
        assert!((lr_schedule(505, total, 1e-3, 0.01).unwrap() - 0.5e-3).abs() < 1e-12);
        assert!(lr_schedule(0, 0, 1e-3, 0.01).is_err());
    }
}
