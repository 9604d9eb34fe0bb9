use crate::autodiff::{Tensor, Var};

/// Exact probability flow for the linear interpolant between `N(0, s0² I)`
/// and `N(m, σ² I)` under the independent coupling.
///
/// With `V_t = s0²(1-t)² + σ²t²` the marginal at time `t` is `N(t m, V_t I)`,
/// the drift is affine in `x`, and the flow map is
/// `X_{s,t}(x) = t m + sqrt(V_t / V_s) (x - s m)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalyticGaussianField {
    pub base_std: f64,
    pub mean: Vec<f64>,
    pub std: f64,
}

impl AnalyticGaussianField {
    pub fn new(base_std: f64, mean: Vec<f64>, std: f64) -> Self {
        AnalyticGaussianField {
            base_std,
            mean,
            std,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Per-coordinate variance of the interpolant at time `t`.
    pub fn variance(&self, t: f64) -> f64 {
        let (a, b) = (self.base_std * (1.0 - t), self.std * t);
        a * a + b * b
    }

    /// `b_t(x) = E[İ_t | I_t = x]`.
    pub fn drift(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let (s0, sig) = (self.base_std * self.base_std, self.std * self.std);
        let k = (t * sig - (1.0 - t) * s0) / self.variance(t);
        x.iter()
            .zip(&self.mean)
            .map(|(xi, m)| m + k * (xi - t * m))
            .collect()
    }

    pub fn map(&self, s: f64, t: f64, x: &[f64]) -> Vec<f64> {
        let r = (self.variance(t) / self.variance(s)).sqrt();
        x.iter()
            .zip(&self.mean)
            .map(|(xi, m)| t * m + r * (xi - s * m))
            .collect()
    }

    /// Gain `c` in `v_{s,t}(x) = m + c (x - s m)`. Written without a
    /// division by `t - s`, so it is smooth across the diagonal, where it
    /// equals the drift gain.
    pub fn velocity_gain(&self, s: f64, t: f64) -> f64 {
        let (s0, sig) = (self.base_std * self.base_std, self.std * self.std);
        let vs = self.variance(s);
        let r = (self.variance(t) / vs).sqrt();
        (s0 * (t + s - 2.0) + sig * (t + s)) / (vs * (r + 1.0))
    }

    pub fn velocity(&self, s: f64, t: f64, x: &[f64]) -> Vec<f64> {
        let c = self.velocity_gain(s, t);
        x.iter()
            .zip(&self.mean)
            .map(|(xi, m)| m + c * (xi - s * m))
            .collect()
    }

    /// Tape version of [`velocity`](Self::velocity) for `n x 1` time columns.
    pub fn forward<'t>(&self, s: Var<'t>, t: Var<'t>, x: Var<'t>) -> Var<'t> {
        let tape = x.tape();
        let (s0, sig) = (self.base_std * self.base_std, self.std * self.std);
        let var = |u: Var<'t>| {
            let one_minus = u.scale(-1.0).add_scalar(1.0);
            one_minus.square().scale(s0) + u.square().scale(sig)
        };
        let (vs, vt) = (var(s), var(t));
        let r = (vt / vs).sqrt();
        let num = (s + t).scale(s0 + sig).add_scalar(-2.0 * s0);
        let c = num / (vs * r.add_scalar(1.0));
        if self.mean.iter().all(|&m| m == 0.0) {
            return x.mul_col(c);
        }
        let n = x.shape().0;
        let mut tiled = Vec::with_capacity(n * self.dim());
        for _ in 0..n {
            tiled.extend_from_slice(&self.mean);
        }
        let means = tape.constant(Tensor::new(n, self.dim(), tiled).expect("shape"));
        let m_row = tape.constant(Tensor::row_vector(self.mean.clone()));
        (x - means.mul_col(s)).mul_col(c).add_row(m_row)
    }
}
