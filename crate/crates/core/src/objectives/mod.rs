//! Self-distillation objectives.
//!
//! Every loss is a batch mean of `e^{-w} r² + w`, where `r` is a per-sample
//! residual and `w = w_{s,t}` the learned log-variance (zero when weighting is
//! off). The diagonal term regresses `v̂_{t,t}(I_t)` on `İ_t`. The
//! off-diagonal term depends on the method:
//!
//! | method | residual |
//! |--------|----------|
//! | LSD    | `∂_t X̂_{s,t}(I_s) - sg[v̂_{t,t}(X̂_{s,t}(I_s))]` |
//! | ESD    | `∂_s X̂_{s,t}(I_s) + ∇X̂_{s,t}(I_s) · sg[v̂_{s,s}(I_s)]` |
//! | PSD    | `v̂_{s,t}(I_s) - sg[(1-γ) v̂_{s,u}(I_s) + γ v̂_{u,t}(X̂_{s,u}(I_s))]` |
//!
//! with `u = γ s + (1 - γ) t`. The PSD residual is the two-jump mismatch
//! `X̂_{s,t} - X̂_{u,t} ∘ X̂_{s,u}` divided by `t - s`.

mod batch;
mod teacher;

pub use batch::{DiagBatch, OffDiagBatch, TrainBatch};
pub use teacher::TeacherSource;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamVars, ParamVector, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::fields::Model;
use crate::interpolants::{intermediate_time, GammaMode};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[default]
    #[serde(rename = "lsd")]
    Lsd,
    #[serde(rename = "esd")]
    Esd,
    #[serde(rename = "psd-u")]
    PsdU,
    #[serde(rename = "psd-m")]
    PsdM,
    /// Diagonal (flow-matching) term only.
    #[serde(rename = "fm")]
    Fm,
}

impl Method {
    pub fn gamma_mode(self) -> Option<GammaMode> {
        match self {
            Method::PsdU => Some(GammaMode::Uniform),
            Method::PsdM => Some(GammaMode::Midpoint),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Lsd => "lsd",
            Method::Esd => "esd",
            Method::PsdU => "psd-u",
            Method::PsdM => "psd-m",
            Method::Fm => "fm",
        }
    }
}

/// Which branches of a residual are cut from the gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StopgradPolicy {
    /// Teacher velocities are constants.
    pub detach_teacher: bool,
    /// Keep `v̂` but detach `(t - s) ∂v̂` in the time derivative of `X̂`.
    pub detach_time_derivative: bool,
    /// ESD only: detach `∇X̂ · v̂_{s,s}`. Costs a second forward pass.
    pub detach_spatial_jvp: bool,
}

impl Default for StopgradPolicy {
    fn default() -> Self {
        StopgradPolicy {
            detach_teacher: true,
            detach_time_derivative: false,
            detach_spatial_jvp: true,
        }
    }
}

/// Parameters used for teacher velocities.
#[derive(Clone, Copy, Debug)]
pub enum Teacher<'a> {
    /// The student's own current parameters.
    Student,
    /// A fixed parameter vector (EMA shadow or frozen checkpoint).
    Fixed {
        model: &'a Model,
        params: &'a ParamVector,
    },
}

/// `e^{-w} r² + w`.
pub fn weighted(r_sq: f64, w: f64) -> f64 {
    (-w).exp() * r_sq + w
}

/// Loss values for one batch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    /// Always `diag + distill`.
    pub total: f64,
    pub diag: f64,
    pub distill: f64,
    /// Mean unweighted squared residual of each term.
    pub diag_residual: f64,
    pub distill_residual: f64,
    /// Largest unweighted squared distillation residual.
    pub distill_residual_max: f64,
    /// Filled in by the training loop after clipping inputs are known.
    pub grad_norm: Option<f64>,
}

/// Tape handles for one (shard of a) batch.
pub struct LossVars<'t> {
    pub total: Var<'t>,
    pub diag: Var<'t>,
    pub distill: Var<'t>,
    /// Per-sample unweighted squared residuals, `n x 1`.
    pub diag_r_sq: Option<Var<'t>>,
    pub distill_r_sq: Option<Var<'t>>,
}

#[derive(Clone, Copy, Debug)]
pub struct Objective<'a> {
    pub model: &'a Model,
    pub method: Method,
    pub policy: StopgradPolicy,
    pub teacher: Teacher<'a>,
}

fn col<'t>(tape: &'t Tape, values: impl Iterator<Item = f64>) -> Var<'t> {
    tape.constant(Tensor::column(values.collect()))
}

fn ones<'t>(tape: &'t Tape, n: usize) -> Var<'t> {
    tape.constant(Tensor::ones(n, 1))
}

fn tangent_or_zero<'t>(v: Var<'t>) -> Var<'t> {
    v.tangent().unwrap_or_else(|| {
        let (r, c) = v.shape();
        v.tape().constant(Tensor::zeros(r, c))
    })
}

fn sq_norm_rows(r: Var<'_>) -> Var<'_> {
    r.square().row_sum()
}

impl<'a> Objective<'a> {
    pub fn new(model: &'a Model, method: Method) -> Self {
        Objective {
            model,
            method,
            policy: StopgradPolicy::default(),
            teacher: Teacher::Student,
        }
    }

    pub fn with_policy(mut self, policy: StopgradPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn with_teacher(mut self, teacher: Teacher<'a>) -> Self {
        self.teacher = teacher;
        self
    }

    fn teacher_model(&self) -> &'a Model {
        match self.teacher {
            Teacher::Student => self.model,
            Teacher::Fixed { model, .. } => model,
        }
    }

    fn detach<'t>(&self, v: Var<'t>) -> Var<'t> {
        if self.policy.detach_teacher {
            v.stopgrad()
        } else {
            v
        }
    }

    fn weigh<'t>(
        &self,
        p: &ParamVars<'t>,
        s: Var<'t>,
        t: Var<'t>,
        r_sq: Var<'t>,
        diagonal: bool,
    ) -> Var<'t> {
        match self.model.log_weight(p, s, t, diagonal) {
            Some(w) => (-w).exp() * r_sq + w,
            None => r_sq,
        }
    }

    /// Per-sample `(r², e^{-w} r² + w)` of the diagonal term.
    pub fn diagonal_terms<'t>(
        &self,
        tape: &'t Tape,
        p: &ParamVars<'t>,
        b: &DiagBatch,
    ) -> (Var<'t>, Var<'t>) {
        let t = tape.constant(b.t.clone());
        let v = self.model.velocity(p, t, t, tape.constant(b.it.clone()));
        let r_sq = sq_norm_rows(v - tape.constant(b.dit.clone()));
        (r_sq, self.weigh(p, t, t, r_sq, true))
    }

    /// Per-sample residual vectors of the selected distillation term.
    pub fn distill_residual<'t>(
        &self,
        tape: &'t Tape,
        p: &ParamVars<'t>,
        tp: &ParamVars<'t>,
        b: &OffDiagBatch,
    ) -> Result<Var<'t>> {
        b.check_order()?;
        match self.method {
            Method::Lsd => Ok(self.lsd_residual(tape, p, tp, b)),
            Method::Esd => Ok(self.esd_residual(tape, p, tp, b)),
            Method::PsdU | Method::PsdM => self.psd_residual(tape, p, tp, b),
            Method::Fm => Err(Error::config("flow matching has no distillation term")),
        }
    }

    fn lsd_residual<'t>(
        &self,
        tape: &'t Tape,
        p: &ParamVars<'t>,
        tp: &ParamVars<'t>,
        b: &OffDiagBatch,
    ) -> Var<'t> {
        let s = tape.constant(b.s.clone());
        let t0 = tape.constant(b.t.clone());
        let t = tape.seed(t0, ones(tape, b.len()));
        let x = tape.constant(b.is.clone());
        let v = self.model.velocity(p, s, t, x);
        let gap = t - s;
        let xt = x + v.mul_col(gap);
        let dxt = if self.policy.detach_time_derivative {
            v.primal() + tangent_or_zero(v).stopgrad().mul_col(gap.primal())
        } else {
            tangent_or_zero(xt)
        };
        let target = self.teacher_model().velocity(tp, t0, t0, xt.primal());
        dxt - self.detach(target)
    }

    fn esd_residual<'t>(
        &self,
        tape: &'t Tape,
        p: &ParamVars<'t>,
        tp: &ParamVars<'t>,
        b: &OffDiagBatch,
    ) -> Var<'t> {
        let n = b.len();
        let s0 = tape.constant(b.s.clone());
        let t = tape.constant(b.t.clone());
        let x0 = tape.constant(b.is.clone());
        let dir = self.detach(self.teacher_model().velocity(tp, s0, s0, x0));

        if !self.policy.detach_spatial_jvp && !self.policy.detach_time_derivative {
            // One jvp over (s, x) with tangent (1, dir).
            let s = tape.seed(s0, ones(tape, n));
            let x = tape.seed(x0, dir);
            return tangent_or_zero(self.model.flow_map(p, s, t, x));
        }

        let s = tape.seed(s0, ones(tape, n));
        let v = self.model.velocity(p, s, t, x0);
        let mut dv = tangent_or_zero(v);
        if self.policy.detach_time_derivative {
            dv = dv.stopgrad();
        }
        let ds_x = dv.mul_col(t - s0) - v.primal();

        let x = tape.seed(x0, dir);
        let mut spatial = tangent_or_zero(self.model.flow_map(p, s0, t, x));
        if self.policy.detach_spatial_jvp {
            spatial = spatial.stopgrad();
        }
        ds_x + spatial
    }

    fn psd_residual<'t>(
        &self,
        tape: &'t Tape,
        p: &ParamVars<'t>,
        tp: &ParamVars<'t>,
        b: &OffDiagBatch,
    ) -> Result<Var<'t>> {
        let gamma = b
            .gamma
            .as_ref()
            .ok_or_else(|| Error::config("PSD batch carries no intermediate fractions"))?;
        let g = gamma.data();
        let u_vals = b.s.data().iter().zip(b.t.data()).zip(g);
        let u = col(
            tape,
            u_vals.map(|((s, t), g)| intermediate_time(*s, *t, *g)),
        );
        let s = tape.constant(b.s.clone());
        let t = tape.constant(b.t.clone());
        let x = tape.constant(b.is.clone());

        let student = self.model.velocity(p, s, t, x);
        let tm = self.teacher_model();
        let v_su = tm.velocity(tp, s, u, x);
        let x_u = x + v_su.mul_col(u - s);
        let v_ut = tm.velocity(tp, u, t, x_u);
        let target = v_su.mul_col(col(tape, g.iter().map(|g| 1.0 - g)))
            + v_ut.mul_col(tape.constant(gamma.clone()));
        Ok(student - self.detach(target))
    }

    /// Loss terms for a batch (or shard). Sums are divided by the global
    /// sub-batch sizes in `counts = (n_diag, n_off)` so that shard losses add
    /// up to the full-batch mean.
    pub fn losses_on<'t>(
        &self,
        tape: &'t Tape,
        p: &ParamVars<'t>,
        tp: &ParamVars<'t>,
        batch: &TrainBatch,
        counts: (usize, usize),
    ) -> Result<LossVars<'t>> {
        let zero = || tape.constant(Tensor::scalar(0.0));
        let (diag, diag_r_sq) = if batch.diag.is_empty() {
            (zero(), None)
        } else {
            let (r_sq, terms) = self.diagonal_terms(tape, p, &batch.diag);
            (terms.sum().scale(1.0 / counts.0 as f64), Some(r_sq))
        };
        let (distill, distill_r_sq) = if batch.off.is_empty() || self.method == Method::Fm {
            (zero(), None)
        } else {
            let r_sq = sq_norm_rows(self.distill_residual(tape, p, tp, &batch.off)?);
            let s = tape.constant(batch.off.s.clone());
            let t = tape.constant(batch.off.t.clone());
            let terms = self.weigh(p, s, t, r_sq, false);
            (terms.sum().scale(1.0 / counts.1 as f64), Some(r_sq))
        };
        Ok(LossVars {
            total: diag + distill,
            diag,
            distill,
            diag_r_sq,
            distill_r_sq,
        })
    }

    /// Loss report without gradients.
    pub fn evaluate(&self, theta: &ParamVector, batch: &TrainBatch) -> Result<LossReport> {
        let tape = Tape::new();
        let p = ParamVars::constants(&tape, theta);
        let tp = self.teacher_vars(&tape);
        let counts = (batch.diag.len(), batch.off.len());
        let vars = self.losses_on(&tape, &p, tp.as_ref().unwrap_or(&p), batch, counts)?;
        tape.check()?;
        Ok(ShardResult::from_vars(&vars).finish(counts))
    }

    fn teacher_vars<'t>(&self, tape: &'t Tape) -> Option<ParamVars<'t>> {
        match self.teacher {
            Teacher::Student => None,
            Teacher::Fixed { params, .. } => Some(ParamVars::constants(tape, params)),
        }
    }

    /// Loss report and gradient, evaluated over `shard_size`-row shards in
    /// parallel and reduced in shard order, so the result does not depend on
    /// the number of threads.
    pub fn loss_and_grad(
        &self,
        theta: &ParamVector,
        batch: &TrainBatch,
        shard_size: usize,
    ) -> Result<(LossReport, ParamVector)> {
        let counts = (batch.diag.len(), batch.off.len());
        let k = batch.len().div_ceil(shard_size.max(1)).max(1);
        let shards = batch.shards(k);
        let results: Vec<Result<(ShardResult, ParamVector)>> = shards
            .par_iter()
            .map(|shard| {
                let tape = Tape::new();
                let p = ParamVars::leaves(&tape, theta);
                let tp = self.teacher_vars(&tape);
                let vars = self.losses_on(&tape, &p, tp.as_ref().unwrap_or(&p), shard, counts)?;
                let grads = tape.gradients(vars.total)?;
                Ok((ShardResult::from_vars(&vars), p.collect(&grads, theta)))
            })
            .collect();

        let mut acc = ShardResult::default();
        let mut grad = theta.zeros_like();
        for r in results {
            let (part, g) = r?;
            acc.merge(&part);
            grad.add_assign(&g);
        }
        Ok((acc.finish(counts), grad))
    }
}

#[derive(Clone, Debug, Default)]
struct ShardResult {
    diag: f64,
    distill: f64,
    diag_r_sq_sum: f64,
    distill_r_sq_sum: f64,
    distill_r_sq_max: f64,
}

impl ShardResult {
    fn from_vars(v: &LossVars<'_>) -> Self {
        let sum = |x: &Option<Var<'_>>| x.map_or(0.0, |x| x.value_ref().sum());
        ShardResult {
            diag: v.diag.value_ref().item(),
            distill: v.distill.value_ref().item(),
            diag_r_sq_sum: sum(&v.diag_r_sq),
            distill_r_sq_sum: sum(&v.distill_r_sq),
            distill_r_sq_max: v.distill_r_sq.map_or(0.0, |x| {
                x.value_ref().data().iter().fold(0.0, |m, &a| m.max(a))
            }),
        }
    }

    fn merge(&mut self, o: &ShardResult) {
        self.diag += o.diag;
        self.distill += o.distill;
        self.diag_r_sq_sum += o.diag_r_sq_sum;
        self.distill_r_sq_sum += o.distill_r_sq_sum;
        self.distill_r_sq_max = self.distill_r_sq_max.max(o.distill_r_sq_max);
    }

    fn finish(&self, (nd, no): (usize, usize)) -> LossReport {
        let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
        LossReport {
            total: self.diag + self.distill,
            diag: self.diag,
            distill: self.distill,
            diag_residual: mean(self.diag_r_sq_sum, nd),
            distill_residual: mean(self.distill_r_sq_sum, no),
            distill_residual_max: self.distill_r_sq_max,
            grad_norm: None,
        }
    }
}

/// Residual vectors of `method` at fixed parameters, `n x d`.
pub fn distill_residuals(
    model: &Model,
    params: &ParamVector,
    method: Method,
    policy: StopgradPolicy,
    batch: &OffDiagBatch,
) -> Result<Tensor> {
    let tape = Tape::new();
    let p = ParamVars::constants(&tape, params);
    let obj = Objective::new(model, method).with_policy(policy);
    let r = obj.distill_residual(&tape, &p, &p, batch)?;
    tape.check()?;
    Ok(r.value())
}

/// Two-jump mismatch `X̂_{s,t}(x) - X̂_{u,t}(X̂_{s,u}(x))`, `u = γs + (1-γ)t`.
pub fn psd_raw_residual(
    model: &Model,
    params: &ParamVector,
    batch: &OffDiagBatch,
) -> Result<Tensor> {
    let gamma = batch
        .gamma
        .as_ref()
        .ok_or_else(|| Error::config("PSD batch carries no intermediate fractions"))?;
    let tape = Tape::new();
    let p = ParamVars::constants(&tape, params);
    let u = col(
        &tape,
        batch
            .s
            .data()
            .iter()
            .zip(batch.t.data())
            .zip(gamma.data())
            .map(|((s, t), g)| intermediate_time(*s, *t, *g)),
    );
    let s = tape.constant(batch.s.clone());
    let t = tape.constant(batch.t.clone());
    let x = tape.constant(batch.is.clone());
    let one = model.flow_map(&p, s, t, x);
    let two = model.flow_map(&p, u, t, model.flow_map(&p, s, u, x));
    let r = one - two;
    tape.check()?;
    Ok(r.value())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weighted_values() {
        assert_eq!(weighted(1.0, 0.0), 1.0);
        assert_eq!(weighted(0.0, 0.7), 0.7);
        // minimiser of e^{-w} l + w is log l
        let l: f64 = 3.0;
        let best = (0..=4000)
            .map(|i| -2.0 + i as f64 * 1e-3)
            .min_by(|a, b| weighted(l, *a).total_cmp(&weighted(l, *b)))
            .unwrap();
        assert!((best - l.ln()).abs() < 1e-3);
    }

    #[test]
    fn method_names_round_trip() {
        for m in [
            Method::Lsd,
            Method::Esd,
            Method::PsdU,
            Method::PsdM,
            Method::Fm,
        ] {
            let s = serde_json::to_string(&m).unwrap();
            assert_eq!(s, format!("\"{}\"", m.name()));
            assert_eq!(serde_json::from_str::<Method>(&s).unwrap(), m);
        }
    }
}
