//! Run configuration: a flat JSON object with every key optional.
//!
//! Unknown keys are rejected. [`RunConfig::validate`] checks every field
//! before any compute and names the offending key in its error.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fields::{AnalyticGaussianField, Field, FlowFieldNet, Model, TimeFeatures, WeightNet};
use crate::interpolants::{DatasetKind, DatasetSpec, Schedule, TimePairSampler};
use crate::objectives::{Method, StopgradPolicy, TeacherSource};

/// Step counts that have a KL column in the metrics file.
pub const KL_STEP_COLUMNS: [usize; 5] = [1, 2, 4, 8, 16];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetName {
    #[default]
    Checkerboard,
    Gaussian,
    GaussianMixture,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[default]
    Mlp,
    /// Closed-form oracle for Gaussian targets; has no trainable field.
    AnalyticGaussian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetName,
    pub checker_cells: usize,
    pub checker_range: f64,
    pub gaussian_mean: Vec<f64>,
    pub gaussian_std: f64,
    pub mixture_centers: Vec<Vec<f64>>,
    pub mixture_stds: Vec<f64>,
    pub mixture_weights: Vec<f64>,
    /// Base standard deviation; `null` matches the target's.
    pub base_std: Option<f64>,
    pub schedule: Schedule,

    pub model: ModelKind,
    pub method: Method,
    pub eta: f64,
    pub detach_teacher: bool,
    pub detach_time_derivative: bool,
    pub detach_spatial_jvp: bool,
    pub teacher: TeacherSource,

    pub hidden: Vec<usize>,
    pub time_features: TimeFeatures,
    pub fourier_features: usize,
    /// Learn `w_{s,t}`; when off every weight is zero.
    pub weighting: bool,
    pub weight_hidden: Vec<usize>,
    /// Separate weight nets for the diagonal and off-diagonal terms.
    pub split_weight: bool,

    pub lr: f64,
    pub lr_decay_start: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// `null` disables clipping.
    pub clip_norm: Option<f64>,
    pub ema_decay: f64,

    pub batch_size: usize,
    pub n_steps: u64,
    pub eval_every: u64,
    /// Steps between KL evaluations; 0 disables them.
    pub kl_every: u64,
    pub kl_samples: usize,
    pub kl_steps: Vec<usize>,
    pub kl_bins: usize,
    pub kl_pseudo_count: f64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    pub seed: u64,
    pub deterministic: bool,
    pub anneal_steps: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub eval_use_ema: bool,
    /// Rows per tape when evaluating a batch.
    pub shard_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetName::Checkerboard,
            checker_cells: 4,
            checker_range: 1.0,
            gaussian_mean: vec![0.0],
            gaussian_std: 1.0,
            mixture_centers: Vec::new(),
            mixture_stds: Vec::new(),
            mixture_weights: Vec::new(),
            base_std: None,
            schedule: Schedule::Linear,
            model: ModelKind::Mlp,
            method: Method::Lsd,
            eta: 0.75,
            detach_teacher: true,
            detach_time_derivative: false,
            detach_spatial_jvp: true,
            teacher: TeacherSource::SelfInstant,
            hidden: vec![256; 4],
            time_features: TimeFeatures::RawGap,
            fourier_features: 0,
            weighting: true,
            weight_hidden: vec![64, 64],
            split_weight: false,
            lr: 1e-3,
            lr_decay_start: 35_000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(10.0),
            ema_decay: 0.999,
            batch_size: 4096,
            n_steps: 20_000,
            eval_every: 100,
            kl_every: 0,
            kl_samples: 64_000,
            kl_steps: KL_STEP_COLUMNS.to_vec(),
            kl_bins: 50,
            kl_pseudo_count: 0.5,
            checkpoint_every: 0,
            seed: 0,
            deterministic: true,
            anneal_steps: None,
            output_dir: None,
            eval_use_ema: true,
            shard_size: 1024,
        }
    }
}

fn field_err(key: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{key}: {msg}"))
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(field_err(
            key,
            format!("must be a positive number, got {v}"),
        ))
    }
}

fn unit_interval(key: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(field_err(key, format!("must lie in [0, 1], got {v}")))
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Canonical serialisation: fixed key order, compact.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serialises")
    }

    /// First 8 bytes (little-endian) of the SHA-256 of [`canonical_json`](Self::canonical_json).
    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset_spec()?;
        unit_interval("eta", self.eta)?;
        if self.model == ModelKind::AnalyticGaussian && self.dataset != DatasetName::Gaussian {
            return Err(field_err(
                "model",
                "analytic_gaussian requires dataset = gaussian",
            ));
        }
        if self.model == ModelKind::Mlp && self.hidden.is_empty() {
            return Err(field_err("hidden", "needs at least one hidden layer"));
        }
        if self.hidden.contains(&0) {
            return Err(field_err("hidden", "widths must be positive"));
        }
        if self.weighting && (self.weight_hidden.is_empty() || self.weight_hidden.contains(&0)) {
            return Err(field_err(
                "weight_hidden",
                "widths must be positive and non-empty",
            ));
        }
        positive("lr", self.lr)?;
        if self.lr_decay_start == 0 {
            return Err(field_err("lr_decay_start", "must be at least 1"));
        }
        for (k, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(field_err(k, format!("must lie in [0, 1), got {v}")));
            }
        }
        positive("eps", self.eps)?;
        if let Some(c) = self.clip_norm {
            positive("clip_norm", c)?;
        }
        unit_interval("ema_decay", self.ema_decay)?;
        if self.batch_size == 0 {
            return Err(field_err("batch_size", "must be at least 1"));
        }
        if self.eval_every == 0 {
            return Err(field_err("eval_every", "must be at least 1"));
        }
        if self.kl_every > 0 {
            if self.dataset != DatasetName::Checkerboard {
                return Err(field_err(
                    "kl_every",
                    "KL evaluation needs the checkerboard dataset",
                ));
            }
            if self.kl_samples == 0 {
                return Err(field_err("kl_samples", "must be at least 1"));
            }
        }
        if self.kl_steps.is_empty() || self.kl_steps.iter().any(|n| !KL_STEP_COLUMNS.contains(n)) {
            return Err(field_err(
                "kl_steps",
                format!("entries must come from {KL_STEP_COLUMNS:?}"),
            ));
        }
        if self.kl_bins == 0 {
            return Err(field_err("kl_bins", "must be at least 1"));
        }
        if !(self.kl_pseudo_count >= 0.0 && self.kl_pseudo_count.is_finite()) {
            return Err(field_err("kl_pseudo_count", "must be non-negative"));
        }
        if self.anneal_steps == Some(0) {
            return Err(field_err("anneal_steps", "must be at least 1"));
        }
        if self.shard_size == 0 {
            return Err(field_err("shard_size", "must be at least 1"));
        }
        Ok(())
    }

    pub fn dataset_spec(&self) -> Result<DatasetSpec> {
        let kind = match self.dataset {
            DatasetName::Checkerboard => DatasetKind::Checkerboard {
                cells: self.checker_cells,
                range: self.checker_range,
            },
            DatasetName::Gaussian => DatasetKind::Gaussian {
                mean: self.gaussian_mean.clone(),
                std: self.gaussian_std,
            },
            DatasetName::GaussianMixture => DatasetKind::GaussianMixture {
                centers: self.mixture_centers.clone(),
                stds: self.mixture_stds.clone(),
                weights: self.mixture_weights.clone(),
            },
        };
        let spec = DatasetSpec {
            kind,
            base_std: self.base_std,
        };
        spec.validate().map_err(|e| match e {
            Error::Config(m) => field_err("dataset", m),
            other => other,
        })?;
        Ok(spec)
    }

    pub fn sampler(&self) -> TimePairSampler {
        TimePairSampler {
            eta: self.eta,
            anneal_steps: self.anneal_steps,
        }
    }

    pub fn policy(&self) -> StopgradPolicy {
        StopgradPolicy {
            detach_teacher: self.detach_teacher,
            detach_time_derivative: self.detach_time_derivative,
            detach_spatial_jvp: self.detach_spatial_jvp,
        }
    }

    pub fn build_model(&self) -> Result<Model> {
        let dataset = self.dataset_spec()?;
        let field = match self.model {
            ModelKind::Mlp => Field::Mlp(FlowFieldNet::new(
                dataset.dim(),
                &self.hidden,
                self.time_features,
                self.fourier_features,
            )?),
            ModelKind::AnalyticGaussian => Field::AnalyticGaussian(AnalyticGaussianField::new(
                dataset.base_std(),
                self.gaussian_mean.clone(),
                self.gaussian_std,
            )),
        };
        let (weight, diag_weight) = match (self.weighting, self.split_weight) {
            (false, _) => (None, None),
            (true, false) => (Some(WeightNet::new("w", &self.weight_hidden)?), None),
            (true, true) => (
                Some(WeightNet::new("w", &self.weight_hidden)?),
                Some(WeightNet::new("wd", &self.weight_hidden)?),
            ),
        };
        Ok(Model {
            field,
            weight,
            diag_weight,
        })
    }

    /// Named presets. The desk presets are a scaled-down version of the
    /// full checkerboard configuration (`checker-paper`).
    pub fn preset(name: &str) -> Result<Self> {
        let desk = |method| RunConfig {
            method,
            kl_every: 20_000,
            checkpoint_every: 5_000,
            ..RunConfig::default()
        };
        Ok(match name {
            "checker-lsd-desk" => desk(Method::Lsd),
            "checker-esd-desk" => desk(Method::Esd),
            "checker-psd-u-desk" => desk(Method::PsdU),
            "checker-psd-m-desk" => desk(Method::PsdM),
            "checker-paper" => RunConfig {
                hidden: vec![512; 4],
                batch_size: 100_000,
                n_steps: 150_000,
                kl_every: 150_000,
                checkpoint_every: 10_000,
                ..RunConfig::default()
            },
            "gaussian-fm" => RunConfig {
                dataset: DatasetName::Gaussian,
                gaussian_mean: vec![0.0],
                gaussian_std: 2.0,
                base_std: Some(1.0),
                method: Method::Fm,
                eta: 1.0,
                hidden: vec![64, 64],
                weighting: false,
                batch_size: 1024,
                n_steps: 5_000,
                ema_decay: 0.99,
                ..RunConfig::default()
            },
            other => {
                return Err(Error::config(format!(
                    "unknown preset `{other}`; known presets: {}",
                    Self::PRESETS.join(", ")
                )))
            }
        })
    }

    pub const PRESETS: [&'static str; 6] = [
        "checker-lsd-desk",
        "checker-esd-desk",
        "checker-psd-u-desk",
        "checker-psd-m-desk",
        "checker-paper",
        "gaussian-fm",
    ];
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_presets_validate() {
        RunConfig::default().validate().unwrap();
        for p in RunConfig::PRESETS {
            RunConfig::preset(p).unwrap().validate().unwrap();
        }
        assert!(RunConfig::preset("nope").is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"etaa": 0.5}"#).is_err());
        let c = RunConfig::from_json(r#"{"eta": 0.5, "method": "psd-m"}"#).unwrap();
        assert_eq!((c.eta, c.method), (0.5, Method::PsdM));
    }

    #[test]
    fn errors_name_the_field() {
        let e = RunConfig::from_json(r#"{"eta": 1.5}"#).unwrap_err();
        assert!(e.to_string().contains("eta"), "{e}");
        let e = RunConfig::from_json(r#"{"teacher": "ema:7"}"#).unwrap_err();
        assert!(e.to_string().contains("teacher"), "{e}");
    }

    #[test]
    fn canonical_round_trip_and_hash() {
        let c = RunConfig::preset("checker-psd-u-desk").unwrap();
        let back = RunConfig::from_json(&c.canonical_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.canonical_json(), c.canonical_json());
        assert_eq!(back.hash(), c.hash());
        assert_ne!(RunConfig::default().hash(), c.hash());
    }
}
