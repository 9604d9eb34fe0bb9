use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// How the PSD intermediate fraction `γ` is drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaMode {
    #[default]
    Uniform,
    Midpoint,
}

pub fn sample_gamma(mode: GammaMode, rng: &mut Rng) -> f64 {
    match mode {
        GammaMode::Uniform => rng.random(),
        GammaMode::Midpoint => 0.5,
    }
}

/// `u = γ s + (1 - γ) t`, so `γ = 0` gives `t` and `γ = 1` gives `s`.
pub fn intermediate_time(s: f64, t: f64, gamma: f64) -> f64 {
    gamma * s + (1.0 - gamma) * t
}

/// Times for one training batch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TimeBatch {
    /// Diagonal times (`s = t`).
    pub diag: Vec<f64>,
    /// Off-diagonal starts, with `s[j] < t[j]`.
    pub s: Vec<f64>,
    pub t: Vec<f64>,
}

/// Mixture sampler: a fraction `eta` of each batch on the diagonal, the rest
/// uniform on `{0 <= s < t <= 1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimePairSampler {
    pub eta: f64,
    /// When set, off-diagonal gaps are clamped to `min(1, k / anneal_steps)`.
    pub anneal_steps: Option<u64>,
}

impl Default for TimePairSampler {
    fn default() -> Self {
        TimePairSampler {
            eta: 0.75,
            anneal_steps: None,
        }
    }
}

impl TimePairSampler {
    pub fn new(eta: f64) -> Result<Self> {
        let s = TimePairSampler {
            eta,
            anneal_steps: None,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::config(format!(
                "eta must lie in [0, 1], got {}",
                self.eta
            )));
        }
        if self.anneal_steps == Some(0) {
            return Err(Error::config("anneal_steps must be positive"));
        }
        Ok(())
    }

    pub fn n_diag(&self, batch: usize) -> usize {
        (self.eta * batch as f64).floor() as usize
    }

    /// Largest admissible gap at (1-based) step `k`.
    pub fn max_gap(&self, k: u64) -> Result<f64> {
        match self.anneal_steps {
            None => Ok(1.0),
            Some(_) if k == 0 => Err(Error::config(
                "annealing is defined for steps k >= 1 (the gap bound at k = 0 is zero)",
            )),
            Some(n) => Ok((k as f64 / n as f64).min(1.0)),
        }
    }

    /// Draws `⌊η M⌋` diagonal times, then `M - ⌊η M⌋` off-diagonal pairs.
    pub fn sample_times(&self, rng: &mut Rng, batch: usize, k: u64) -> Result<TimeBatch> {
        self.validate()?;
        let n_diag = self.n_diag(batch);
        let n_off = batch - n_diag;
        let gap = self.max_gap(k)?;
        let diag = (0..n_diag).map(|_| rng.random::<f64>()).collect();
        let mut s = Vec::with_capacity(n_off);
        let mut t = Vec::with_capacity(n_off);
        while s.len() < n_off {
            let (a, b): (f64, f64) = (rng.random(), rng.random());
            if a == b {
                continue;
            }
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            s.push(lo);
            t.push(hi.min(lo + gap));
        }
        Ok(TimeBatch { diag, s, t })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn split_counts() {
        let mut rng = stream(0, Stream::Times);
        let b = TimePairSampler::new(0.75)
            .unwrap()
            .sample_times(&mut rng, 100, 1)
            .unwrap();
        assert_eq!((b.diag.len(), b.s.len()), (75, 25));
        let b = TimePairSampler::new(1.0)
            .unwrap()
            .sample_times(&mut rng, 100, 1)
            .unwrap();
        assert_eq!((b.diag.len(), b.s.len()), (100, 0));
        assert!(TimePairSampler::new(1.5).is_err());
        assert!(TimePairSampler::new(-0.1).is_err());
    }

    #[test]
    fn off_diagonal_is_strictly_ordered() {
        let mut rng = stream(3, Stream::Times);
        let b = TimePairSampler::new(0.0)
            .unwrap()
            .sample_times(&mut rng, 10_000, 1)
            .unwrap();
        assert!(b
            .s
            .iter()
            .zip(&b.t)
            .all(|(s, t)| 0.0 <= *s && s < t && *t <= 1.0));
    }

    #[test]
    fn annealing_clamps_gap() {
        let sampler = TimePairSampler {
            eta: 0.0,
            anneal_steps: Some(100),
        };
        let mut rng = stream(5, Stream::Times);
        let b = sampler.sample_times(&mut rng, 5_000, 10).unwrap();
        let widest = b.s.iter().zip(&b.t).map(|(s, t)| t - s).fold(0.0, f64::max);
        assert!(widest <= 0.1 + 1e-15 && widest > 0.09);
        assert!(b.s.iter().zip(&b.t).all(|(s, t)| s < t));
        assert!(sampler.sample_times(&mut rng, 10, 0).is_err());
        assert_eq!(sampler.max_gap(1000).unwrap(), 1.0);
    }

    #[test]
    fn gamma_modes() {
        let mut rng = stream(9, Stream::Times);
        assert_eq!(sample_gamma(GammaMode::Midpoint, &mut rng), 0.5);
        assert_eq!(intermediate_time(0.2, 0.8, 0.0), 0.8);
        assert_eq!(intermediate_time(0.2, 0.8, 1.0), 0.2);
    }
}
