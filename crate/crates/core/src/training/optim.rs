use crate::autodiff::ParamVector;
use crate::error::{Error, Result};

/// Rectified Adam state.
///
/// Follows the published rule with bias-corrected first moment. While the
/// variance rectification term `ρ_t` is at most 5 the step is plain
/// momentum, `θ -= lr · m̂`; afterwards it is
/// `θ -= lr · r_t · m̂ · sqrt(1 - β2^t) / (sqrt(v) + ε)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RAdamState {
    pub m: ParamVector,
    pub v: ParamVector,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl RAdamState {
    pub fn new(layout: &ParamVector, beta1: f64, beta2: f64, eps: f64) -> Self {
        RAdamState {
            m: layout.zeros_like(),
            v: layout.zeros_like(),
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }

    /// `ρ_t` after `t` steps.
    pub fn rho(&self, t: u64) -> f64 {
        let rho_inf = 2.0 / (1.0 - self.beta2) - 1.0;
        let b2t = self.beta2.powi(t as i32);
        rho_inf - 2.0 * t as f64 * b2t / (1.0 - b2t)
    }

    /// Applies one update in place. A non-finite gradient leaves both the
    /// state and `theta` untouched.
    pub fn step(&mut self, theta: &mut ParamVector, grad: &ParamVector, lr: f64) -> Result<()> {
        if !theta.same_layout(grad) || !theta.same_layout(&self.m) {
            return Err(Error::Shape(
                "optimizer state, parameters and gradient differ in layout".into(),
            ));
        }
        if !grad.is_finite() {
            return Err(Error::non_finite("radam_step"));
        }
        self.step += 1;
        let t = self.step;
        let (b1, b2) = (self.beta1, self.beta2);
        let bias1 = 1.0 - b1.powi(t as i32);
        let bias2 = 1.0 - b2.powi(t as i32);
        let rho_inf = 2.0 / (1.0 - b2) - 1.0;
        let rho_t = self.rho(t);
        let rect = if rho_t > 5.0 {
            Some(
                ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf
                    / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
                    .sqrt(),
            )
        } else {
            None
        };

        let m = self.m.data_mut();
        let v = self.v.data_mut();
        for (((th, g), mi), vi) in theta.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
            *mi = b1 * *mi + (1.0 - b1) * g;
            *vi = b2 * *vi + (1.0 - b2) * g * g;
            let m_hat = *mi / bias1;
            match rect {
                Some(r) => {
                    let l = bias2.sqrt() / (vi.sqrt() + self.eps);
                    *th -= lr * m_hat * r * l;
                }
                None => *th -= lr * m_hat,
            }
        }
        Ok(())
    }
}

/// `base · min(1, sqrt(k0 / k))` for 1-based step `k`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub decay_start: u64,
}

impl LrSchedule {
    pub fn at(&self, k: u64) -> f64 {
        if k <= self.decay_start {
            self.base
        } else {
            self.base * (self.decay_start as f64 / k as f64).sqrt()
        }
    }
}

/// Rescales `grad` to norm `max_norm` when it is longer. Returns the norm
/// before clipping.
pub fn clip_gradients(grad: &mut ParamVector, max_norm: f64) -> f64 {
    let norm = grad.norm();
    if norm > max_norm {
        let c = max_norm / norm;
        grad.data_mut().iter_mut().for_each(|g| *g *= c);
    }
    norm
}

/// `φ ← δ φ + (1 - δ) θ`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState {
    pub shadow: ParamVector,
    pub decay: f64,
}

impl EmaState {
    pub fn new(theta: &ParamVector, decay: f64) -> Self {
        EmaState {
            shadow: theta.clone(),
            decay,
        }
    }

    pub fn update(&mut self, theta: &ParamVector) {
        assert!(
            self.shadow.same_layout(theta),
            "EMA layout differs from parameters"
        );
        let d = self.decay;
        for (p, t) in self.shadow.data_mut().iter_mut().zip(theta.data()) {
            *p = d * *p + (1.0 - d) * t;
        }
    }
}
