//! Reverse-mode gradients of every training loss against central finite
//! differences on small random networks.
//!
//! Stopgradients make the training gradient differ from the derivative of
//! the loss value, so the check runs with every detach flag off and the
//! student as its own teacher. Every branch is then differentiated.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::autodiff::ParamVector;
use crate::error::Result;
use crate::fields::{Field, FlowFieldNet, Model, TimeFeatures, WeightNet};
use crate::interpolants::{DatasetSpec, GammaMode, Schedule, TimePairSampler};
use crate::objectives::{Method, Objective, StopgradPolicy, TrainBatch};
use crate::rng::{stream, Rng, Stream};

/// Step of the fourth-order central stencil. The stencil's truncation error
/// is `O(h⁴)`, so a step this large keeps rounding in the loss value small.
pub const FD_STEP: f64 = 1e-3;
/// Components smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;
/// Pass threshold on the largest relative error.
pub const THRESHOLD: f64 = 1e-5;

/// Losses covered by the check.
pub const LOSSES: [&str; 4] = ["diagonal", "lsd", "esd", "psd"];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckEntry {
    pub net: usize,
    pub loss: &'static str,
    pub n_params: usize,
    pub max_rel_err: f64,
}

/// `|a - b| / max(|a|, |b|, REL_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Largest relative error between `analytic` and the five-point central
/// difference of `f` around `theta`.
pub fn max_relative_error(
    theta: &ParamVector,
    analytic: &ParamVector,
    f: impl Fn(&ParamVector) -> Result<f64>,
) -> Result<f64> {
    let mut probe = theta.clone();
    let mut worst: f64 = 0.0;
    for i in 0..theta.len() {
        let x = theta.data()[i];
        let mut at = |d: f64| {
            probe.data_mut()[i] = x + d;
            let v = f(&probe);
            probe.data_mut()[i] = x;
            v
        };
        let h = FD_STEP;
        let fd = (8.0 * (at(h)? - at(-h)?) - (at(2.0 * h)? - at(-2.0 * h)?)) / (12.0 * h);
        worst = worst.max(relative_error(analytic.data()[i], fd));
    }
    Ok(worst)
}

/// A random small flow-map network with a learned weight, and parameters
/// perturbed away from initialisation so no layer is zero.
pub fn random_model(rng: &mut Rng) -> Result<(Model, ParamVector)> {
    let depth = rng.random_range(1..=3);
    let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(3..=8)).collect();
    let tf = if rng.random_bool(0.5) {
        TimeFeatures::RawGap
    } else {
        TimeFeatures::RawPair
    };
    let fourier = rng.random_range(0..=1);
    let model = Model {
        field: Field::Mlp(FlowFieldNet::new(2, &hidden, tf, fourier)?),
        weight: Some(WeightNet::new("w", &[4])?),
        diag_weight: None,
    };
    let mut theta = model.init_params(rng)?;
    let noise = Normal::new(0.0, 0.4).expect("valid normal");
    for v in theta.data_mut() {
        *v += noise.sample(rng);
    }
    Ok((model, theta))
}

fn check_loss(
    model: &Model,
    theta: &ParamVector,
    method: Method,
    batch: &TrainBatch,
) -> Result<f64> {
    let policy = StopgradPolicy {
        detach_teacher: false,
        detach_time_derivative: false,
        detach_spatial_jvp: false,
    };
    let obj = Objective::new(model, method).with_policy(policy);
    let (_, g) = obj.loss_and_grad(theta, batch, batch.len())?;
    max_relative_error(theta, &g, |p| Ok(obj.evaluate(p, batch)?.total))
}

/// Checks all [`LOSSES`] on `n_nets` random networks drawn from `seed`.
pub fn gradcheck(seed: u64, n_nets: usize) -> Result<Vec<GradcheckEntry>> {
    let mut init = stream(seed, Stream::Init);
    let mut data = stream(seed, Stream::Data);
    let mut times = stream(seed, Stream::Times);
    let dataset = DatasetSpec::checkerboard();
    let rows = 12;
    let mut out = Vec::with_capacity(n_nets * LOSSES.len());
    for net in 0..n_nets {
        let (model, theta) = random_model(&mut init)?;
        let diag_sampler = TimePairSampler::new(1.0)?;
        let off_sampler = TimePairSampler::new(0.0)?;
        let diag = TrainBatch::sample(
            &dataset,
            Schedule::Linear,
            &diag_sampler,
            None,
            &mut data,
            &mut times,
            rows,
            1,
        )?;
        let off = TrainBatch::sample(
            &dataset,
            Schedule::Linear,
            &off_sampler,
            None,
            &mut data,
            &mut times,
            rows,
            1,
        )?;
        let psd = TrainBatch::sample(
            &dataset,
            Schedule::Linear,
            &off_sampler,
            Some(GammaMode::Uniform),
            &mut data,
            &mut times,
            rows,
            1,
        )?;
        let cases = [
            (Method::Fm, &diag),
            (Method::Lsd, &off),
            (Method::Esd, &off),
            (Method::PsdU, &psd),
        ];
        for (name, (method, batch)) in LOSSES.iter().zip(cases) {
            out.push(GradcheckEntry {
                net,
                loss: name,
                n_params: theta.len(),
                max_rel_err: check_loss(&model, &theta, method, batch)?,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(2.0, 1.0), 0.5);
        assert_eq!(relative_error(1e-9, 0.0), 1e-3);
    }

    #[test]
    fn one_net_passes() {
        for e in gradcheck(3, 1).unwrap() {
            assert!(e.max_rel_err <= THRESHOLD, "{e:?}");
        }
    }
}
