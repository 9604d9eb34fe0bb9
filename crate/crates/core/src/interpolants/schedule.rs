use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;

/// Interpolant coefficients `I_t = α_t x0 + β_t x1`, with
/// `α_0 = 1, α_1 = 0, β_0 = 0, β_1 = 1`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// `α = 1 - t`, `β = t`.
    #[default]
    Linear,
    /// `α = cos(πt/2)`, `β = sin(πt/2)`.
    Trig,
}

impl Schedule {
    pub fn alpha(self, t: f64) -> f64 {
        match self {
            Schedule::Linear => 1.0 - t,
            Schedule::Trig => (FRAC_PI_2 * t).cos(),
        }
    }

    pub fn beta(self, t: f64) -> f64 {
        match self {
            Schedule::Linear => t,
            Schedule::Trig => (FRAC_PI_2 * t).sin(),
        }
    }

    pub fn alpha_dot(self, t: f64) -> f64 {
        match self {
            Schedule::Linear => -1.0,
            Schedule::Trig => -FRAC_PI_2 * (FRAC_PI_2 * t).sin(),
        }
    }

    pub fn beta_dot(self, t: f64) -> f64 {
        match self {
            Schedule::Linear => 1.0,
            Schedule::Trig => FRAC_PI_2 * (FRAC_PI_2 * t).cos(),
        }
    }
}

/// `(I_t, İ_t)` for a batch: `x0`, `x1` are `n x d`, `t` is `n x 1`.
pub fn interpolate(schedule: Schedule, x0: &Tensor, x1: &Tensor, t: &Tensor) -> (Tensor, Tensor) {
    assert_eq!(x0.shape(), x1.shape(), "x0 and x1 must have the same shape");
    assert_eq!(t.shape(), (x0.rows(), 1), "one time per row");
    let d = x0.cols();
    let mut it = Vec::with_capacity(x0.len());
    let mut dit = Vec::with_capacity(x0.len());
    for (r, &tr) in t.data().iter().enumerate() {
        let (a, b) = (schedule.alpha(tr), schedule.beta(tr));
        let (da, db) = (schedule.alpha_dot(tr), schedule.beta_dot(tr));
        for c in 0..d {
            let (u, v) = (x0.get(r, c), x1.get(r, c));
            it.push(a * u + b * v);
            dit.push(da * u + db * v);
        }
    }
    let n = x0.rows();
    (
        Tensor::new(n, d, it).expect("shape"),
        Tensor::new(n, d, dit).expect("shape"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundary_conditions() {
        for s in [Schedule::Linear, Schedule::Trig] {
            assert!((s.alpha(0.0) - 1.0).abs() <= 1e-15);
            assert!(s.alpha(1.0).abs() <= 1e-15);
            assert!(s.beta(0.0).abs() <= 1e-15);
            assert!((s.beta(1.0) - 1.0).abs() <= 1e-15);
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let h = 1e-6;
        for s in [Schedule::Linear, Schedule::Trig] {
            for &t in &[0.1, 0.5, 0.9] {
                let fa = (s.alpha(t + h) - s.alpha(t - h)) / (2.0 * h);
                let fb = (s.beta(t + h) - s.beta(t - h)) / (2.0 * h);
                assert!((fa - s.alpha_dot(t)).abs() < 1e-9);
                assert!((fb - s.beta_dot(t)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn linear_at_zero_and_half() {
        let x0 = Tensor::new(1, 2, vec![0.3, -0.4]).unwrap();
        let x1 = Tensor::new(1, 2, vec![1.5, 2.0]).unwrap();
        let (i, di) = interpolate(Schedule::Linear, &x0, &x1, &Tensor::column(vec![0.0]));
        assert_eq!(i, x0);
        assert_eq!(di.data(), &[1.5 - 0.3, 2.0 + 0.4]);

        let x0 = Tensor::new(1, 2, vec![0.0, 0.0]).unwrap();
        let x1 = Tensor::new(1, 2, vec![1.0, 1.0]).unwrap();
        let (i, di) = interpolate(Schedule::Linear, &x0, &x1, &Tensor::column(vec![0.5]));
        assert_eq!(i.data(), &[0.5, 0.5]);
        assert_eq!(di.data(), &[1.0, 1.0]);
    }

    #[test]
    fn trig_at_half() {
        let x0 = Tensor::new(1, 2, vec![0.3, -1.2]).unwrap();
        let x1 = Tensor::new(1, 2, vec![2.0, 0.7]).unwrap();
        let (i, di) = interpolate(Schedule::Trig, &x0, &x1, &Tensor::column(vec![0.5]));
        let r2 = std::f64::consts::SQRT_2;
        for c in 0..2 {
            let (a, b) = (x0.get(0, c), x1.get(0, c));
            assert!((i.get(0, c) - (a + b) / r2).abs() < 1e-15);
            assert!((di.get(0, c) - FRAC_PI_2 * (b - a) / r2).abs() < 1e-15);
        }
    }
}
