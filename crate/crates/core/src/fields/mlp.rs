use std::f64::consts::PI;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamVars, ParamVector, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Fully connected GELU network whose parameters live under `prefix.` in a
/// [`ParamVector`]. Hidden layers use fan-in uniform initialisation; the
/// output layer starts at zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    weights: Vec<String>,
    biases: Vec<String>,
}

impl Mlp {
    pub fn new(prefix: &str, input: usize, hidden: &[usize], output: usize) -> Result<Self> {
        if input == 0 || output == 0 || hidden.contains(&0) {
            return Err(Error::config(format!(
                "`{prefix}` layer widths must be positive"
            )));
        }
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(output);
        let n = widths.len() - 1;
        Ok(Mlp {
            weights: (0..n).map(|i| format!("{prefix}.w{i}")).collect(),
            biases: (0..n).map(|i| format!("{prefix}.b{i}")).collect(),
            widths,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("at least two widths")
    }

    pub fn init(&self, rng: &mut Rng, params: &mut ParamVector) -> Result<()> {
        let n = self.weights.len();
        for i in 0..n {
            let (fan_in, fan_out) = (self.widths[i], self.widths[i + 1]);
            let last = i + 1 == n;
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut draw = |len: usize| -> Vec<f64> {
                if last {
                    vec![0.0; len]
                } else {
                    (0..len).map(|_| rng.random_range(-bound..bound)).collect()
                }
            };
            let w = draw(fan_in * fan_out);
            let b = draw(fan_out);
            params.push_segment(&self.weights[i], fan_in, fan_out, w)?;
            params.push_segment(&self.biases[i], 1, fan_out, b)?;
        }
        Ok(())
    }

    pub fn forward<'t>(&self, params: &ParamVars<'t>, input: Var<'t>) -> Var<'t> {
        let n = self.weights.len();
        let mut h = input;
        for i in 0..n {
            h = h
                .matmul(params.get(&self.weights[i]))
                .add_row(params.get(&self.biases[i]));
            if i + 1 < n {
                h = h.gelu();
            }
        }
        h
    }
}

/// How the two times enter the network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeFeatures {
    /// `(s, t)`.
    RawPair,
    /// `(s, t - s)`; the gap is exactly zero on the diagonal.
    #[default]
    RawGap,
}

impl TimeFeatures {
    fn pair<'t>(self, s: Var<'t>, t: Var<'t>) -> (Var<'t>, Var<'t>) {
        match self {
            TimeFeatures::RawPair => (s, t),
            TimeFeatures::RawGap => (s, t - s),
        }
    }
}

/// Appends `sin(kπa), cos(kπa)` for `k = 1..=count` and each time feature `a`.
fn fourier<'t>(features: &mut Vec<Var<'t>>, a: Var<'t>, count: usize) {
    for k in 1..=count {
        let z = a.scale(PI * k as f64);
        features.push(z.sin());
        features.push(z.cos());
    }
}

/// The learned two-time velocity `v̂_{s,t}(x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowFieldNet {
    dim: usize,
    time_features: TimeFeatures,
    fourier_features: usize,
    mlp: Mlp,
}

impl FlowFieldNet {
    pub const PREFIX: &'static str = "v";

    pub fn new(
        dim: usize,
        hidden: &[usize],
        time_features: TimeFeatures,
        fourier_features: usize,
    ) -> Result<Self> {
        let input = dim + 2 + 4 * fourier_features;
        Ok(FlowFieldNet {
            dim,
            time_features,
            fourier_features,
            mlp: Mlp::new(Self::PREFIX, input, hidden, dim)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn init(&self, rng: &mut Rng, params: &mut ParamVector) -> Result<()> {
        self.mlp.init(rng, params)
    }

    /// Network input `[x, τ1, τ2, fourier(τ1), fourier(τ2)]`.
    pub fn features<'t>(&self, s: Var<'t>, t: Var<'t>, x: Var<'t>) -> Var<'t> {
        let (a, b) = self.time_features.pair(s, t);
        let mut parts = vec![x, a, b];
        fourier(&mut parts, a, self.fourier_features);
        fourier(&mut parts, b, self.fourier_features);
        x.tape().concat(&parts)
    }

    pub fn forward<'t>(
        &self,
        params: &ParamVars<'t>,
        s: Var<'t>,
        t: Var<'t>,
        x: Var<'t>,
    ) -> Var<'t> {
        self.mlp.forward(params, self.features(s, t, x))
    }
}

/// The learned log-variance `w_{s,t}`, a small MLP on `(s, t - s)`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightNet {
    mlp: Mlp,
}

impl WeightNet {
    pub fn new(prefix: &str, hidden: &[usize]) -> Result<Self> {
        Ok(WeightNet {
            mlp: Mlp::new(prefix, 2, hidden, 1)?,
        })
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn init(&self, rng: &mut Rng, params: &mut ParamVector) -> Result<()> {
        self.mlp.init(rng, params)
    }

    /// `n x 1` column of `w_{s,t}`.
    pub fn forward<'t>(&self, params: &ParamVars<'t>, s: Var<'t>, t: Var<'t>) -> Var<'t> {
        let input = s.tape().concat(&[s, t - s]);
        self.mlp.forward(params, input)
    }
}
