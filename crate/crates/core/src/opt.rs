//! SGD and Adam with constant or cosine learning-rate schedules.

use indexmap::IndexMap;

use crate::params::{GradReport, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// Cosine decay from the base rate to zero over `total_steps`.
    Cosine { total_steps: usize },
}

impl LrSchedule {
    fn rate(&self, base: f64, step: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine { total_steps } => {
                let frac = (step as f64 / (*total_steps).max(1) as f64).min(1.0);
                base * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

#[derive(Debug)]
pub enum Optimizer {
    Sgd(Sgd),
    Adam(Adam),
}

impl Optimizer {
    pub fn sgd(lr: f64, schedule: LrSchedule) -> Self {
        Optimizer::Sgd(Sgd {
            lr,
            schedule,
            step: 0,
        })
    }

    pub fn adam(lr: f64, schedule: LrSchedule) -> Self {
        Optimizer::Adam(Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule,
            step: 0,
            moments: IndexMap::new(),
        })
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &GradReport) {
        match self {
            Optimizer::Sgd(o) => o.step(params, grads),
            Optimizer::Adam(o) => o.step(params, grads),
        }
    }
}

#[derive(Debug)]
pub struct Sgd {
    lr: f64,
    schedule: LrSchedule,
    step: usize,
}

impl Sgd {
    pub fn step(&mut self, params: &mut ParamSet, grads: &GradReport) {
        let rate = self.schedule.rate(self.lr, self.step);
        for (name, g) in grads.iter() {
            let p = params.get_mut(name);
            for (v, gi) in p.values.iter_mut().zip(g) {
                *v -= rate * gi;
            }
        }
        self.step += 1;
    }
}

#[derive(Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    schedule: LrSchedule,
    step: usize,
    moments: IndexMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn step(&mut self, params: &mut ParamSet, grads: &GradReport) {
        self.step += 1;
        let rate = self.schedule.rate(self.lr, self.step - 1);
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, g) in grads.iter() {
            let p = params.get_mut(name);
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.values[i] -= rate * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}
