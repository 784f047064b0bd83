//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use crate::error::Result;
use crate::param::{Param, ParamVisit};
use crate::tensor::Tensor4;

#[derive(Clone, Copy, Debug)]
pub struct OptimConfig {
    pub lr_start: f64,
    pub lr_end: f64,
    pub total_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr_start: 1e-4,
            lr_end: 1e-6,
            total_steps: 1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

pub struct AdamW {
    pub cfg: OptimConfig,
    step: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
    /// Steps skipped because a gradient was non-finite.
    pub skipped: u64,
}

#[derive(Clone, Copy, Debug)]
pub struct StepOutcome {
    pub applied: bool,
    pub lr: f64,
}

impl AdamW {
    pub fn new(cfg: OptimConfig) -> Self {
        AdamW {
            cfg,
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
            skipped: 0,
        }
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    /// Cosine decay from lr_start to lr_end over the configured run; the
    /// final step lands on lr_end exactly.
    pub fn lr_at(&self, step: u64) -> f64 {
        let total = self.cfg.total_steps.max(1);
        if step + 1 >= total {
            return self.cfg.lr_end;
        }
        let t = step as f64 / (total - 1) as f64;
        self.cfg.lr_end
            + 0.5 * (self.cfg.lr_start - self.cfg.lr_end) * (1.0 + (std::f64::consts::PI * t).cos())
    }

    fn ensure_state(&mut self, model: &dyn ParamVisit) {
        if !self.first_moment.is_empty() {
            return;
        }
        model.visit("", &mut |_, p| {
            self.first_moment.push(vec![0.0; p.value.numel()]);
            self.second_moment.push(vec![0.0; p.value.numel()]);
        });
    }

    /// One update over every parameter of the model, reading gradients from
    /// `Param::value.grad`. A non-finite gradient anywhere skips the whole
    /// step (the schedule still advances) and bumps the warning counter.
    pub fn step(&mut self, model: &mut dyn ParamVisit) -> Result<StepOutcome> {
        self.ensure_state(model);
        let lr = self.lr_at(self.step);
        let mut finite = true;
        model.visit("", &mut |_, p| {
            if let Some(g) = &p.value.grad {
                if g.iter().any(|v| !v.is_finite()) {
                    finite = false;
                }
            }
        });
        if !finite {
            self.skipped += 1;
            self.step += 1;
            log::warn!("skipping optimizer step {}: non-finite gradient", self.step);
            return Ok(StepOutcome { applied: false, lr });
        }
        let t = (self.step + 1) as f64;
        let bc1 = 1.0 - self.cfg.beta1.powf(t);
        let bc2 = 1.0 - self.cfg.beta2.powf(t);
        let cfg = self.cfg;
        let mut idx = 0usize;
        let first = &mut self.first_moment;
        let second = &mut self.second_moment;
        model.visit_mut("", &mut |_, p| {
            let m = &mut first[idx];
            let v = &mut second[idx];
            idx += 1;
            let grad = match &p.value.grad {
                Some(g) => g.clone(),
                None => vec![0.0; p.value.numel()],
            };
            for (e, val) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[e];
                m[e] = cfg.beta1 * m[e] + (1.0 - cfg.beta1) * g;
                v[e] = cfg.beta2 * v[e] + (1.0 - cfg.beta2) * g * g;
                let mhat = m[e] / bc1;
                let vhat = v[e] / bc2;
                *val -= lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * *val);
            }
        });
        self.step += 1;
        Ok(StepOutcome { applied: true, lr })
    }

    /// Serialize moment buffers for checkpointing, flat per parameter in
    /// visit order.
    pub fn state_tensors(&self) -> Vec<(String, Tensor4)> {
        let mut out = Vec::new();
        for (i, (m, v)) in self.first_moment.iter().zip(&self.second_moment).enumerate() {
            out.push((format!("optim.m.{i}"), Tensor4::from_flat(m.clone())));
            out.push((format!("optim.v.{i}"), Tensor4::from_flat(v.clone())));
        }
        out.push((
            "optim.step".to_string(),
            Tensor4::from_flat(vec![self.step as f64, self.skipped as f64]),
        ));
        out
    }

    /// Restore moment buffers written by [`Self::state_tensors`].
    pub fn load_state(&mut self, model: &dyn ParamVisit, tensors: &dyn Fn(&str) -> Option<Tensor4>) {
        self.ensure_state(model);
        for i in 0..self.first_moment.len() {
            if let Some(t) = tensors(&format!("optim.m.{i}")) {
                if t.numel() == self.first_moment[i].len() {
                    self.first_moment[i].copy_from_slice(t.data());
                }
            }
            if let Some(t) = tensors(&format!("optim.v.{i}")) {
                if t.numel() == self.second_moment[i].len() {
                    self.second_moment[i].copy_from_slice(t.data());
                }
            }
        }
        if let Some(t) = tensors("optim.step") {
            self.step = t.data()[0] as u64;
            self.skipped = t.data()[1] as u64;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::join;

    struct One {
        p: Param,
    }
    impl ParamVisit for One {
        fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
            f(&join(prefix, "p"), &self.p);
        }
        fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
            f(&join(prefix, "p"), &mut self.p);
        }
    }

    #[test]
    fn zero_gradient_zero_decay_is_fixed_point() {
        let mut m = One {
            p: Param::new(Tensor4::from_flat(vec![0.7, -0.3])),
        };
        m.p.value.grad = Some(vec![0.0, 0.0]);
        let mut opt = AdamW::new(OptimConfig {
            weight_decay: 0.0,
            total_steps: 10,
            ..Default::default()
        });
        opt.step(&mut m).unwrap();
        assert_eq!(m.p.value.data(), &[0.7, -0.3]);
    }

    #[test]
    fn first_step_closed_form() {
        let mut m = One {
            p: Param::new(Tensor4::from_flat(vec![0.0])),
        };
        m.p.value.grad = Some(vec![1.0]);
        let cfg = OptimConfig {
            lr_start: 1e-3,
            lr_end: 1e-3,
            weight_decay: 0.0,
            total_steps: 10,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg);
        opt.step(&mut m).unwrap();
        // m-hat = g, v-hat = g^2 after bias correction at t=1.
        let expected = -cfg.lr_start * 1.0 / (1.0f64.sqrt() + cfg.eps);
        assert!((m.p.value.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn decoupled_decay_with_zero_gradient() {
        let mut m = One {
            p: Param::new(Tensor4::from_flat(vec![2.0])),
        };
        m.p.value.grad = Some(vec![0.0]);
        let cfg = OptimConfig {
            lr_start: 0.01,
            lr_end: 0.01,
            weight_decay: 0.1,
            total_steps: 10,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg);
        opt.step(&mut m).unwrap();
        assert!((m.p.value.data()[0] - 2.0 * (1.0 - 0.01 * 0.1)).abs() < 1e-12);
    }

    #[test]
    fn cosine_endpoints() {
        let opt = AdamW::new(OptimConfig {
            lr_start: 1e-4,
            lr_end: 1e-6,
            total_steps: 200,
            ..Default::default()
        });
        assert!((opt.lr_at(0) - 1e-4).abs() < 1e-18);
        assert!((opt.lr_at(199) - 1e-6).abs() < 1e-12);
        let mid = opt.lr_at(99);
        assert!(mid < 1e-4 && mid > 1e-6);
    }

    #[test]
    fn non_finite_gradient_skips_step() {
        let mut m = One {
            p: Param::new(Tensor4::from_flat(vec![1.0])),
        };
        m.p.value.grad = Some(vec![f64::NAN]);
        let mut opt = AdamW::new(OptimConfig::default());
        let out = opt.step(&mut m).unwrap();
        assert!(!out.applied);
        assert_eq!(opt.skipped, 1);
        assert_eq!(m.p.value.data(), &[1.0]);
    }
}
