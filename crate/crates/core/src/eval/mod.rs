//! Few-step sampling, histogram KL against analytic densities, residual
//! probes and the 1D Gaussian `W2` check.

mod histogram;
mod probe;

pub use histogram::{kl_checkerboard, kl_quadrature, Histogram2D};
pub use probe::{residual_probe, ProbeGrid, ProbeReport};

use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::autodiff::{ParamVars, ParamVector, Tape, Tensor};
use crate::error::{Error, Result};
use crate::fields::Model;
use crate::interpolants::DatasetSpec;
use crate::rng::{stream, Stream};

/// Rows per tape during sampling.
const SAMPLE_CHUNK: usize = 4096;

/// Uniform grid `0 = t_0 < … < t_n = 1` with exact endpoints.
pub fn time_grid(n: usize) -> Vec<f64> {
    (0..=n).map(|i| i as f64 / n as f64).collect()
}

/// Output of [`sample_flow_map`].
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRun {
    pub grid: Vec<f64>,
    pub samples: Tensor,
    /// Rows that contain a NaN or infinity.
    pub n_nonfinite: usize,
}

/// Applies `X̂_{t_i, t_{i+1}}` for `i = 0..n` to every row of `x0`.
///
/// Non-finite rows are counted, not treated as errors.
pub fn sample_flow_map(
    model: &Model,
    params: &ParamVector,
    x0: &Tensor,
    n: usize,
) -> Result<SampleRun> {
    if n == 0 {
        return Err(Error::config("sampling needs at least one step"));
    }
    if x0.cols() != model.dim() {
        return Err(Error::Shape(format!(
            "base samples have {} columns, model dimension is {}",
            x0.cols(),
            model.dim()
        )));
    }
    let grid = time_grid(n);
    let starts: Vec<usize> = (0..x0.rows()).step_by(SAMPLE_CHUNK).collect();
    let chunks: Vec<Tensor> = starts
        .par_iter()
        .map(|&start| {
            let rows = SAMPLE_CHUNK.min(x0.rows() - start);
            let mut x = x0.slice_rows(start, rows);
            for w in grid.windows(2) {
                let tape = Tape::new();
                let p = ParamVars::constants(&tape, params);
                let s = tape.constant(Tensor::full(rows, 1, w[0]));
                let t = tape.constant(Tensor::full(rows, 1, w[1]));
                x = model.flow_map(&p, s, t, tape.constant(x)).value();
            }
            x
        })
        .collect();
    let refs: Vec<&Tensor> = chunks.iter().collect();
    let samples = if refs.is_empty() {
        Tensor::zeros(0, x0.cols())
    } else {
        Tensor::vcat(&refs)
    };
    let n_nonfinite = samples
        .iter_rows()
        .filter(|r| r.iter().any(|v| !v.is_finite()))
        .count();
    Ok(SampleRun {
        grid,
        samples,
        n_nonfinite,
    })
}

/// Base draws from the sampling stream of `seed`, pushed through `n` steps.
pub fn sample_model(
    model: &Model,
    params: &ParamVector,
    dataset: &DatasetSpec,
    n: usize,
    n_samples: usize,
    seed: u64,
) -> Result<SampleRun> {
    let mut rng = stream(seed, Stream::Sampling);
    let x0 = dataset.sample_base(&mut rng, n_samples);
    sample_flow_map(model, params, &x0, n)
}

/// `W2²` between `N(mean, std²)` fitted to `samples` and `N(m, σ²)`.
pub fn w2_gaussian_1d(samples: &[f64], m: f64, sigma: f64) -> f64 {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean - m).powi(2) + (var.sqrt() - sigma).powi(2)
}

/// `W2²` between the empirical law of `samples` and `N(m, σ²)`, through the
/// quantile coupling: the `i`-th order statistic is paired with the normal
/// quantile at `(i + 1/2) / n`.
pub fn w2_empirical_gaussian_1d(samples: &[f64], m: f64, sigma: f64) -> Result<f64> {
    if samples.is_empty() || samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::Eval(
            "W2 needs a non-empty set of finite samples".into(),
        ));
    }
    let normal = Normal::new(m, sigma).map_err(|e| Error::config(format!("W2 reference: {e}")))?;
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let sum: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, x)| (x - normal.inverse_cdf((i as f64 + 0.5) / n)).powi(2))
        .sum();
    Ok(sum / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{AnalyticGaussianField, Field, FlowFieldNet, TimeFeatures};

    #[test]
    fn grid_endpoints_are_exact() {
        for n in [1, 3, 7, 16] {
            let g = time_grid(n);
            assert_eq!((g[0], g[n]), (0.0, 1.0));
            assert!(g.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn shift_gives_squared_offset() {
        let xs: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.37).sin()).collect();
        let shifted: Vec<f64> = xs.iter().map(|x| x + 0.3).collect();
        let mean = xs.iter().sum::<f64>() / 1000.0;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 1000.0;
        let w = w2_gaussian_1d(&shifted, mean, var.sqrt());
        assert!((w - 0.09).abs() < 1e-12);
    }

    #[test]
    fn identity_network_returns_base_draws() {
        let net = FlowFieldNet::new(2, &[8], TimeFeatures::RawGap, 0).unwrap();
        let model = Model::unweighted(Field::Mlp(net));
        let p = model.init_params(&mut stream(0, Stream::Init)).unwrap();
        let x0 = DatasetSpec::checkerboard().sample_base(&mut stream(0, Stream::Sampling), 50);
        let run = sample_flow_map(&model, &p, &x0, 4).unwrap();
        assert_eq!(run.samples, x0);
        assert!(sample_flow_map(&model, &p, &x0, 0).is_err());
    }

    #[test]
    fn analytic_map_telescopes() {
        let model = Model::unweighted(Field::AnalyticGaussian(AnalyticGaussianField::new(
            1.0,
            vec![0.0],
            2.0,
        )));
        let p = ParamVector::new();
        let x0 = Tensor::column(vec![-1.0, 0.25, 2.0]);
        let one = sample_flow_map(&model, &p, &x0, 1).unwrap().samples;
        let many = sample_flow_map(&model, &p, &x0, 16).unwrap().samples;
        for (a, b) in one.data().iter().zip(many.data()) {
            assert!((a - b).abs() < 1e-14);
        }
        assert_eq!(one.data(), &[-2.0, 0.5, 4.0]);
    }

    #[test]
    fn empirical_w2_of_exact_quantiles() {
        let n = 1000;
        let normal = Normal::new(0.0, 2.0).unwrap();
        let q: Vec<f64> = (0..n)
            .map(|i| normal.inverse_cdf((i as f64 + 0.5) / n as f64))
            .collect();
        assert!(w2_empirical_gaussian_1d(&q, 0.0, 2.0).unwrap() < 1e-20);
        let shifted: Vec<f64> = q.iter().map(|x| x + 0.3).collect();
        assert!((w2_empirical_gaussian_1d(&shifted, 0.0, 2.0).unwrap() - 0.09).abs() < 1e-12);
        assert!(w2_empirical_gaussian_1d(&[f64::NAN], 0.0, 1.0).is_err());
    }
}
