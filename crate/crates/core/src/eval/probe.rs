use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamVector, Tensor};
use crate::error::Result;
use crate::fields::{dx_dt, eulerian_jvp, eval_v, eval_x, Model};

/// Step of the fourth-order central difference in the tangent probe.
pub const TANGENT_STEP: f64 = 1e-3;

const CHUNK: usize = 2048;

/// Every `(s, t)` pair from `times` crossed with every row of `points`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeGrid {
    pub times: Vec<f64>,
    pub points: Tensor,
}

impl ProbeGrid {
    /// `n` evenly spaced times in `[0, 1]`, endpoints included.
    pub fn uniform(n: usize, points: Tensor) -> Self {
        let times = if n == 1 {
            vec![0.5]
        } else {
            (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
        };
        ProbeGrid { times, points }
    }

    fn pairs(&self) -> (Tensor, Tensor, Tensor) {
        let (p, d) = self.points.shape();
        let n = self.times.len() * self.times.len() * p;
        let (mut s, mut t, mut x) = (
            Vec::with_capacity(n),
            Vec::with_capacity(n),
            Vec::with_capacity(n * d),
        );
        for &a in &self.times {
            for &b in &self.times {
                for r in self.points.iter_rows() {
                    s.push(a);
                    t.push(b);
                    x.extend_from_slice(r);
                }
            }
        }
        let rows = s.len();
        (
            Tensor::column(s),
            Tensor::column(t),
            Tensor::new(rows, d, x).expect("shape"),
        )
    }
}

/// Root-mean-square and largest norms of the flow-map residuals over a
/// probe grid.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// `∂_t X̂_{s,t}(x) - v̂_{t,t}(X̂_{s,t}(x))`.
    pub lagrangian_rms: f64,
    /// `∂_s X̂_{s,t}(x) + ∇X̂_{s,t}(x) · v̂_{s,s}(x)`.
    pub eulerian_rms: f64,
    /// `X̂_{s,t}(x) - X̂_{u,t}(X̂_{s,u}(x))` with `u = (s + t) / 2`.
    pub semigroup_rms: f64,
    /// Five-point central difference of `τ ↦ X̂_{t,τ}(x)` at `τ = t`, minus
    /// `v̂_{t,t}(x)`.
    pub tangent_rms: f64,
    pub lagrangian_max: f64,
    pub eulerian_max: f64,
    pub semigroup_max: f64,
    pub tangent_max: f64,
}

/// Running sum of squared row norms and the largest row norm.
#[derive(Default)]
struct Acc {
    sum_sq: f64,
    max: f64,
}

impl Acc {
    fn add(&mut self, r: &Tensor) {
        for row in r.iter_rows() {
            let sq: f64 = row.iter().map(|v| v * v).sum();
            self.sum_sq += sq;
            // NaN must not be swallowed by `f64::max`
            self.max = if sq.is_nan() {
                f64::NAN
            } else {
                self.max.max(sq.sqrt())
            };
        }
    }

    fn rms(&self, rows: usize) -> f64 {
        (self.sum_sq / rows.max(1) as f64).sqrt()
    }
}

fn sub(a: &Tensor, b: &Tensor) -> Tensor {
    a.zip_map(b, |x, y| x - y)
}

pub fn residual_probe(
    model: &Model,
    params: &ParamVector,
    grid: &ProbeGrid,
) -> Result<ProbeReport> {
    let (s_all, t_all, x_all) = grid.pairs();
    let n = s_all.rows();
    let (mut lag, mut eul, mut semi) = (Acc::default(), Acc::default(), Acc::default());
    for start in (0..n).step_by(CHUNK) {
        let k = CHUNK.min(n - start);
        let (s, t, x) = (
            s_all.slice_rows(start, k),
            t_all.slice_rows(start, k),
            x_all.slice_rows(start, k),
        );

        let (xt, dxt) = dx_dt(model, params, &s, &t, &x)?;
        lag.add(&sub(&dxt, &eval_v(model, params, &t, &t, &xt)?));

        let bs = eval_v(model, params, &s, &s, &x)?;
        eul.add(&eulerian_jvp(model, params, &s, &t, &x, &bs)?.1);

        let u = s.zip_map(&t, |a, b| 0.5 * (a + b));
        let two = eval_x(model, params, &u, &t, &eval_x(model, params, &s, &u, &x)?)?;
        semi.add(&sub(&xt, &two));
    }

    let p = grid.points.rows();
    let mut tan = Acc::default();
    for &t in &grid.times {
        let col = |v: f64| Tensor::full(p, 1, v);
        let at = |d: f64| eval_x(model, params, &col(t), &col(t + d), &grid.points);
        let h = TANGENT_STEP;
        let near = at(h)?.zip_map(&at(-h)?, |a, b| a - b);
        let far = at(2.0 * h)?.zip_map(&at(-2.0 * h)?, |a, b| a - b);
        let fd = near.zip_map(&far, |n, f| (8.0 * n - f) / (12.0 * h));
        tan.add(&sub(
            &fd,
            &eval_v(model, params, &col(t), &col(t), &grid.points)?,
        ));
    }

    Ok(ProbeReport {
        lagrangian_rms: lag.rms(n),
        eulerian_rms: eul.rms(n),
        semigroup_rms: semi.rms(n),
        tangent_rms: tan.rms(grid.times.len() * p),
        lagrangian_max: lag.max,
        eulerian_max: eul.max,
        semigroup_max: semi.max,
        tangent_max: tan.max,
    })
}
