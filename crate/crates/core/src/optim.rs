//! Adam with per-group learning rates and log-linear decay.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
        }
    }
}

/// Learning rate that decays log-linearly from `init` to `end` over `steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub init: f64,
    /// `None` keeps the rate constant.
    pub end: Option<f64>,
    pub steps: usize,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule {
            init: lr,
            end: None,
            steps: 1,
        }
    }

    pub fn decay(init: f64, end: f64, steps: usize) -> Self {
        LrSchedule {
            init,
            end: Some(end),
            steps,
        }
    }

    pub fn at(&self, step: usize) -> f64 {
        match self.end {
            None => self.init,
            Some(end) if self.init > 0.0 && end > 0.0 => {
                let t = (step as f64 / self.steps.max(1) as f64).clamp(0.0, 1.0);
                (self.init.ln() * (1.0 - t) + end.ln() * t).exp()
            }
            Some(_) => self.init,
        }
    }
}

/// Moment estimates for one flat parameter group.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    /// Computes the update for each parameter; `apply` receives `(index, delta)`
    /// where `delta` is to be added to the parameter.
    pub fn update(&mut self, grads: &[f64], lr: f64, cfg: &AdamConfig, mut apply: impl FnMut(usize, f64)) {
        assert_eq!(grads.len(), self.m.len(), "gradient and state length differ");
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for (i, &g) in grads.iter().enumerate() {
            let m = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            let v = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            self.m[i] = m;
            self.v[i] = v;
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            apply(i, -lr * m_hat / (v_hat.sqrt() + cfg.eps));
        }
    }

    /// Adam step on `f32` parameters in place.
    pub fn step_f32(&mut self, params: &mut [f32], grads: &[f64], lr: f64, cfg: &AdamConfig) {
        self.update(grads, lr, cfg, |i, d| params[i] = (params[i] as f64 + d) as f32);
    }

    /// Keeps rows (of `stride` entries) whose mask entry is true.
    pub fn retain_rows(&mut self, keep: &[bool], stride: usize) {
        for buf in [&mut self.m, &mut self.v] {
            let mut out = Vec::with_capacity(buf.len());
            for (r, &k) in keep.iter().enumerate() {
                if k {
                    out.extend_from_slice(&buf[r * stride..(r + 1) * stride]);
                }
            }
            *buf = out;
        }
    }

    /// Appends zeroed moments for `rows` new rows.
    pub fn extend_rows(&mut self, rows: usize, stride: usize) {
        self.m.resize(self.m.len() + rows * stride, 0.0);
        self.v.resize(self.v.len() + rows * stride, 0.0);
    }
}
