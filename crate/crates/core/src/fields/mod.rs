//! The learned two-time field, its Euler-step flow map, the learned loss
//! weight, and the closed-form Gaussian oracle.
//!
//! The flow map is parameterised as `X̂_{s,t}(x) = x + (t - s) v̂_{s,t}(x)`,
//! so `X̂_{t,t}` is the identity for every parameter vector and `v̂_{t,t}` is
//! the velocity of the probability flow.
//!
//! Batched evaluators take `n x d` points and `n x 1` time columns.

mod analytic;
mod mlp;

pub use analytic::AnalyticGaussianField;
pub use mlp::{FlowFieldNet, Mlp, TimeFeatures, WeightNet};

use crate::autodiff::{ParamVars, ParamVector, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Source of `v̂_{s,t}`.
#[derive(Clone, Debug, PartialEq)]
pub enum Field {
    Mlp(FlowFieldNet),
    /// Parameter-free oracle.
    AnalyticGaussian(AnalyticGaussianField),
}

/// A field together with its optional learned weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub field: Field,
    /// Shared weight net, or the off-diagonal one when split.
    pub weight: Option<WeightNet>,
    /// Separate diagonal weight net; `None` reuses `weight` at `(t, t)`.
    pub diag_weight: Option<WeightNet>,
}

impl Model {
    pub fn unweighted(field: Field) -> Self {
        Model {
            field,
            weight: None,
            diag_weight: None,
        }
    }

    pub fn dim(&self) -> usize {
        match &self.field {
            Field::Mlp(net) => net.dim(),
            Field::AnalyticGaussian(g) => g.dim(),
        }
    }

    pub fn init_params(&self, rng: &mut Rng) -> Result<ParamVector> {
        let mut p = ParamVector::new();
        if let Field::Mlp(net) = &self.field {
            net.init(rng, &mut p)?;
        }
        for w in self.weight.iter().chain(&self.diag_weight) {
            w.init(rng, &mut p)?;
        }
        Ok(p)
    }

    /// `v̂_{s,t}(x)` on the tape.
    pub fn velocity<'t>(&self, p: &ParamVars<'t>, s: Var<'t>, t: Var<'t>, x: Var<'t>) -> Var<'t> {
        match &self.field {
            Field::Mlp(net) => net.forward(p, s, t, x),
            Field::AnalyticGaussian(g) => g.forward(s, t, x),
        }
    }

    /// `X̂_{s,t}(x) = x + (t - s) v̂_{s,t}(x)` on the tape.
    pub fn flow_map<'t>(&self, p: &ParamVars<'t>, s: Var<'t>, t: Var<'t>, x: Var<'t>) -> Var<'t> {
        x + self.velocity(p, s, t, x).mul_col(t - s)
    }

    /// `w_{s,t}` as an `n x 1` column, or `None` when weighting is off.
    pub fn log_weight<'t>(
        &self,
        p: &ParamVars<'t>,
        s: Var<'t>,
        t: Var<'t>,
        diagonal: bool,
    ) -> Option<Var<'t>> {
        let net = match (&self.diag_weight, diagonal) {
            (Some(d), true) => d,
            _ => self.weight.as_ref()?,
        };
        Some(net.forward(p, s, t))
    }
}

fn check_batch(s: &Tensor, t: &Tensor, x: &Tensor, dim: usize) -> Result<()> {
    let n = x.rows();
    if x.cols() != dim || s.shape() != (n, 1) || t.shape() != (n, 1) {
        return Err(Error::Shape(format!(
            "expected x: {n}x{dim}, s and t: {n}x1; got x: {:?}, s: {:?}, t: {:?}",
            x.shape(),
            s.shape(),
            t.shape()
        )));
    }
    Ok(())
}

/// `v̂_{s,t}(x)`.
pub fn eval_v(
    model: &Model,
    params: &ParamVector,
    s: &Tensor,
    t: &Tensor,
    x: &Tensor,
) -> Result<Tensor> {
    check_batch(s, t, x, model.dim())?;
    let tape = Tape::new();
    let p = ParamVars::constants(&tape, params);
    let v = model.velocity(
        &p,
        tape.constant(s.clone()),
        tape.constant(t.clone()),
        tape.constant(x.clone()),
    );
    tape.check()?;
    Ok(v.value())
}

/// `X̂_{s,t}(x)`.
pub fn eval_x(
    model: &Model,
    params: &ParamVector,
    s: &Tensor,
    t: &Tensor,
    x: &Tensor,
) -> Result<Tensor> {
    check_batch(s, t, x, model.dim())?;
    let tape = Tape::new();
    let p = ParamVars::constants(&tape, params);
    let y = model.flow_map(
        &p,
        tape.constant(s.clone()),
        tape.constant(t.clone()),
        tape.constant(x.clone()),
    );
    tape.check()?;
    Ok(y.value())
}

/// `(X̂_{s,t}(x), ∂_t X̂_{s,t}(x))` from one forward pass with a tangent in `t`.
pub fn dx_dt(
    model: &Model,
    params: &ParamVector,
    s: &Tensor,
    t: &Tensor,
    x: &Tensor,
) -> Result<(Tensor, Tensor)> {
    check_batch(s, t, x, model.dim())?;
    let tape = Tape::new();
    let p = ParamVars::constants(&tape, params);
    let tv = tape.constant(t.clone());
    let tv = tape.seed(tv, tape.constant(Tensor::ones(t.rows(), 1)));
    let y = model.flow_map(&p, tape.constant(s.clone()), tv, tape.constant(x.clone()));
    tape.check()?;
    Ok((y.value(), y.tangent_value()))
}

/// `(X̂_{s,t}(x), ∂_s X̂_{s,t}(x) + ∇X̂_{s,t}(x) · dir)` from one forward pass
/// over the augmented input `(s, x)` with tangent `(1, dir)`.
pub fn eulerian_jvp(
    model: &Model,
    params: &ParamVector,
    s: &Tensor,
    t: &Tensor,
    x: &Tensor,
    dir: &Tensor,
) -> Result<(Tensor, Tensor)> {
    check_batch(s, t, x, model.dim())?;
    if dir.shape() != x.shape() {
        return Err(Error::Shape(format!(
            "direction {:?} does not match points {:?}",
            dir.shape(),
            x.shape()
        )));
    }
    let tape = Tape::new();
    let p = ParamVars::constants(&tape, params);
    let sv = tape.seed(
        tape.constant(s.clone()),
        tape.constant(Tensor::ones(s.rows(), 1)),
    );
    let xv = tape.seed(tape.constant(x.clone()), tape.constant(dir.clone()));
    let y = model.flow_map(&p, sv, tape.constant(t.clone()), xv);
    tape.check()?;
    Ok((y.value(), y.tangent_value()))
}

/// `w_{s,t}` as an `n x 1` column; zero when the model has no weight net.
pub fn eval_w(model: &Model, params: &ParamVector, s: &Tensor, t: &Tensor) -> Result<Tensor> {
    if s.cols() != 1 || s.shape() != t.shape() {
        return Err(Error::Shape(format!(
            "time columns must be n x 1 and equal in shape; got {:?} and {:?}",
            s.shape(),
            t.shape()
        )));
    }
    let tape = Tape::new();
    let p = ParamVars::constants(&tape, params);
    let diagonal = s == t;
    match model.log_weight(
        &p,
        tape.constant(s.clone()),
        tape.constant(t.clone()),
        diagonal,
    ) {
        Some(w) => {
            tape.check()?;
            Ok(w.value())
        }
        None => Ok(Tensor::zeros(s.rows(), 1)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn net_model(seed: u64) -> (Model, ParamVector) {
        let net = FlowFieldNet::new(2, &[16, 16], TimeFeatures::RawGap, 1).unwrap();
        let model = Model {
            field: Field::Mlp(net),
            weight: Some(WeightNet::new("w", &[8]).unwrap()),
            diag_weight: None,
        };
        let mut p = model.init_params(&mut stream(seed, Stream::Init)).unwrap();
        // give the zero-initialised output layer some weight
        let mut rng = stream(seed + 1, Stream::Init);
        for v in p.values_mut("v.w2").unwrap() {
            *v = rand::Rng::random_range(&mut rng, -0.5..0.5);
        }
        (model, p)
    }

    #[test]
    fn diagonal_map_is_identity_bitwise() {
        let (model, p) = net_model(4);
        let x = Tensor::new(3, 2, vec![0.1, -2.0, 3.5, 0.0, -0.0, 1e-300]).unwrap();
        let t = Tensor::column(vec![0.0, 0.4, 1.0]);
        let y = eval_x(&model, &p, &t, &t, &x).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!(a.to_bits() == b.to_bits() || (*a == 0.0 && *b == 0.0));
        }
    }

    #[test]
    fn zero_final_layer_gives_identity_and_zero_derivatives() {
        let net = FlowFieldNet::new(2, &[8], TimeFeatures::RawGap, 0).unwrap();
        let model = Model::unweighted(Field::Mlp(net));
        let p = model.init_params(&mut stream(0, Stream::Init)).unwrap();
        let x = Tensor::new(2, 2, vec![0.3, -0.4, 1.0, 2.0]).unwrap();
        let (s, t) = (
            Tensor::column(vec![0.1, 0.2]),
            Tensor::column(vec![0.9, 0.5]),
        );
        assert_eq!(eval_x(&model, &p, &s, &t, &x).unwrap(), x);
        assert_eq!(
            dx_dt(&model, &p, &s, &t, &x).unwrap().1,
            Tensor::zeros(2, 2)
        );
        let dir = Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(eulerian_jvp(&model, &p, &s, &t, &x, &dir).unwrap().1, dir);
        assert_eq!(eval_w(&model, &p, &s, &t).unwrap(), Tensor::zeros(2, 1));
    }

    #[test]
    fn dx_dt_matches_central_difference() {
        let (model, p) = net_model(11);
        let x = Tensor::new(2, 2, vec![0.3, -0.4, 1.0, 0.2]).unwrap();
        let s = Tensor::column(vec![0.1, 0.3]);
        let t = Tensor::column(vec![0.6, 0.8]);
        let h = 1e-5;
        let (_, d) = dx_dt(&model, &p, &s, &t, &x).unwrap();
        let up = eval_x(&model, &p, &s, &t.map(|v| v + h), &x).unwrap();
        let dn = eval_x(&model, &p, &s, &t.map(|v| v - h), &x).unwrap();
        let fd = up.zip_map(&dn, |a, b| (a - b) / (2.0 * h));
        let err = d.zip_map(&fd, |a, b| (a - b).abs()).max_abs() / fd.max_abs();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn shape_errors() {
        let (model, p) = net_model(0);
        let x = Tensor::zeros(3, 2);
        let s = Tensor::zeros(2, 1);
        assert!(matches!(
            eval_v(&model, &p, &s, &s, &x),
            Err(Error::Shape(_))
        ));
    }
}
