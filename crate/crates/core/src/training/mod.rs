//! The optimisation loop: batch sampling, loss and gradient, clipping,
//! RAdam, EMA tracking, periodic evaluation, metrics and checkpoints.

mod checkpoint;
mod metrics;
mod optim;

pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use metrics::{MetricsRow, MetricsWriter, HEADER};
pub use optim::{clip_gradients, EmaState, LrSchedule, RAdamState};

use std::fs;
use std::path::{Path, PathBuf};

use crate::autodiff::ParamVector;
use crate::config::{RunConfig, KL_STEP_COLUMNS};
use crate::error::{Error, Result};
use crate::eval::{kl_checkerboard, sample_model};
use crate::fields::Model;
use crate::interpolants::{DatasetSpec, TimePairSampler};
use crate::objectives::{LossReport, Objective, Teacher, TeacherSource, TrainBatch};
use crate::rng::{stream, Rng, RngState, Stream};

/// Environment variable capping the worker threads used by a run.
pub const THREADS_ENV: &str = "FMAP_THREADS";

/// What happened at one optimisation step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: LossReport,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

/// Training state between steps.
pub struct Trainer {
    pub config: RunConfig,
    pub dataset: DatasetSpec,
    pub model: Model,
    sampler: TimePairSampler,
    lr: LrSchedule,
    pub theta: ParamVector,
    pub radam: RAdamState,
    pub ema: EmaState,
    /// Separate shadow for an `ema:<decay>` teacher.
    pub teacher_ema: Option<EmaState>,
    frozen: Option<(Model, ParamVector)>,
    data_rng: Rng,
    times_rng: Rng,
    /// Number of completed steps.
    pub step: u64,
}

/// A checkpoint opened for evaluation: its config, model, dataset and the
/// parameters selected by `eval_use_ema`.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub config: RunConfig,
    pub model: Model,
    pub dataset: DatasetSpec,
    pub params: ParamVector,
    pub step: u64,
}

impl TrainedModel {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = ckpt.config()?;
        let model = config.build_model()?;
        let params = ckpt.eval_params(config.eval_use_ema).clone();
        if !model
            .init_params(&mut stream(0, Stream::Init))?
            .same_layout(&params)
        {
            return Err(Error::Format(
                "checkpoint parameters do not match its config".into(),
            ));
        }
        Ok(TrainedModel {
            dataset: config.dataset_spec()?,
            model,
            params,
            step: ckpt.step,
            config,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

fn load_frozen(path: &Path, model: &Model) -> Result<(Model, ParamVector)> {
    let teacher = TrainedModel::load(path)?;
    if teacher.model.dim() != model.dim() {
        return Err(Error::config(format!(
            "teacher: frozen checkpoint has dimension {}, student has {}",
            teacher.model.dim(),
            model.dim()
        )));
    }
    Ok((teacher.model, teacher.params))
}

impl Trainer {
    /// Fresh state at step 0 with parameters drawn from the init stream.
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let dataset = config.dataset_spec()?;
        let model = config.build_model()?;
        let theta = model.init_params(&mut stream(config.seed, Stream::Init))?;
        let teacher_ema = match config.teacher {
            TeacherSource::Ema(d) => Some(EmaState::new(&theta, d)),
            _ => None,
        };
        let frozen = match &config.teacher {
            TeacherSource::Frozen(p) => Some(load_frozen(p, &model)?),
            _ => None,
        };
        Ok(Trainer {
            sampler: config.sampler(),
            lr: LrSchedule {
                base: config.lr,
                decay_start: config.lr_decay_start,
            },
            radam: RAdamState::new(&theta, config.beta1, config.beta2, config.eps),
            ema: EmaState::new(&theta, config.ema_decay),
            teacher_ema,
            frozen,
            data_rng: stream(config.seed, Stream::Data),
            times_rng: stream(config.seed, Stream::Times),
            step: 0,
            theta,
            dataset,
            model,
            config,
        })
    }

    /// Restores the state saved in `ckpt`. The checkpoint must have been
    /// written by a run of the same configuration.
    pub fn from_checkpoint(config: RunConfig, ckpt: Checkpoint) -> Result<Self> {
        if ckpt.config_hash != config.hash() {
            return Err(Error::config(format!(
                "checkpoint was written with config hash {:016x}, this config hashes to {:016x}",
                ckpt.config_hash,
                config.hash()
            )));
        }
        let mut t = Trainer::new(config)?;
        if !t.theta.same_layout(&ckpt.theta) {
            return Err(Error::Format(
                "checkpoint parameters do not match the model layout".into(),
            ));
        }
        if t.teacher_ema.is_some() != ckpt.teacher_ema.is_some() {
            return Err(Error::Format(
                "checkpoint teacher state does not match the config".into(),
            ));
        }
        let [data, times] = ckpt.rng.as_slice() else {
            return Err(Error::Format(format!(
                "expected 2 rng states, found {}",
                ckpt.rng.len()
            )));
        };
        t.data_rng = data.restore();
        t.times_rng = times.restore();
        t.theta = ckpt.theta;
        t.ema.shadow = ckpt.ema;
        if let (Some(e), Some(shadow)) = (t.teacher_ema.as_mut(), ckpt.teacher_ema) {
            e.shadow = shadow;
        }
        t.radam = ckpt.radam;
        t.step = ckpt.step;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_hash: self.config.hash(),
            step: self.step,
            theta: self.theta.clone(),
            ema: self.ema.shadow.clone(),
            teacher_ema: self.teacher_ema.as_ref().map(|e| e.shadow.clone()),
            radam: self.radam.clone(),
            rng: vec![
                RngState::capture(&self.data_rng),
                RngState::capture(&self.times_rng),
            ],
            config_json: self.config.canonical_json(),
        }
    }

    /// Parameters used for evaluation.
    pub fn eval_params(&self) -> &ParamVector {
        if self.config.eval_use_ema {
            &self.ema.shadow
        } else {
            &self.theta
        }
    }

    fn objective(&self) -> Objective<'_> {
        let teacher = match (&self.teacher_ema, &self.frozen) {
            (Some(e), _) => Teacher::Fixed {
                model: &self.model,
                params: &e.shadow,
            },
            (None, Some((model, params))) => Teacher::Fixed { model, params },
            (None, None) => Teacher::Student,
        };
        Objective::new(&self.model, self.config.method)
            .with_policy(self.config.policy())
            .with_teacher(teacher)
    }

    /// Runs one step. On a numeric failure the state is left as it was
    /// before the step, apart from the consumed random draws.
    pub fn step(&mut self) -> Result<StepRecord> {
        let k = self.step + 1;
        let batch = TrainBatch::sample(
            &self.dataset,
            self.config.schedule,
            &self.sampler,
            self.config.method.gamma_mode(),
            &mut self.data_rng,
            &mut self.times_rng,
            self.config.batch_size,
            k,
        )?;
        let diverged = |source: Error, loss: Option<&LossReport>| Error::Diverged {
            step: k,
            loss_diag: loss.map_or(f64::NAN, |l| l.diag),
            loss_sd: loss.map_or(f64::NAN, |l| l.distill),
            source: Box::new(source),
        };
        let (mut loss, mut grad) =
            match self
                .objective()
                .loss_and_grad(&self.theta, &batch, self.config.shard_size)
            {
                Ok(r) => r,
                Err(e) if e.is_numeric() => return Err(diverged(e, None)),
                Err(e) => return Err(e),
            };
        if !(loss.total.is_finite() && loss.diag.is_finite() && loss.distill.is_finite()) {
            return Err(diverged(Error::non_finite("loss"), Some(&loss)));
        }
        if !grad.is_finite() {
            return Err(diverged(Error::non_finite("gradient"), Some(&loss)));
        }
        let grad_norm = match self.config.clip_norm {
            Some(c) => clip_gradients(&mut grad, c),
            None => grad.norm(),
        };
        loss.grad_norm = Some(grad_norm);
        let lr = self.lr.at(k);
        self.radam
            .step(&mut self.theta, &grad, lr)
            .map_err(|e| diverged(e, Some(&loss)))?;
        self.ema.update(&self.theta);
        if let Some(e) = self.teacher_ema.as_mut() {
            e.update(&self.theta);
        }
        self.step = k;
        Ok(StepRecord {
            step: k,
            lr,
            loss,
            grad_norm,
        })
    }

    /// KL at each configured step count, using a fresh sampling stream.
    pub fn kl_columns(&self) -> Result<[Option<f64>; KL_STEP_COLUMNS.len()]> {
        let mut out = [None; KL_STEP_COLUMNS.len()];
        for (slot, &n) in out.iter_mut().zip(&KL_STEP_COLUMNS) {
            if !self.config.kl_steps.contains(&n) {
                continue;
            }
            let run = sample_model(
                &self.model,
                self.eval_params(),
                &self.dataset,
                n,
                self.config.kl_samples,
                self.config.seed,
            )?;
            *slot = Some(kl_checkerboard(
                &run.samples,
                &self.dataset,
                self.config.kl_bins,
                self.config.kl_pseudo_count,
            )?);
        }
        Ok(out)
    }

    fn is_eval_step(&self, k: u64) -> bool {
        k.is_multiple_of(self.config.eval_every) || k == self.config.n_steps
    }

    fn is_kl_step(&self, k: u64) -> bool {
        self.config.kl_every > 0
            && (k.is_multiple_of(self.config.kl_every) || k == self.config.n_steps)
    }
}

/// Result of a training run.
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// One record per step taken in this invocation.
    pub history: Vec<StepRecord>,
    /// Last KL evaluation, if any.
    pub last_kl: Option<[Option<f64>; KL_STEP_COLUMNS.len()]>,
}

/// Runs `f` on a pool limited by `FMAP_THREADS` when that is set.
pub fn with_thread_pool<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(f());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Error::config(format!(
            "{THREADS_ENV} must be a positive integer, got `{raw}`"
        ))
    })?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| Error::config(format!("{THREADS_ENV}: {e}")))?;
    Ok(pool.install(f))
}

fn prepare_output(config: &RunConfig) -> Result<Option<PathBuf>> {
    let Some(dir) = &config.output_dir else {
        return Ok(None);
    };
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.json"), config.canonical_json())?;
    Ok(Some(dir.clone()))
}

/// Trains from scratch for `config.n_steps` steps.
///
/// With an output directory this writes `config.json`, `metrics.csv`,
/// `ckpt_<step>.fmap` every `checkpoint_every` steps and `final.fmap`.
pub fn train(config: &RunConfig) -> Result<TrainOutcome> {
    train_with(config, |_| {})
}

/// [`train`], calling `on_row` with every metrics row as it is produced.
pub fn train_with(
    config: &RunConfig,
    on_row: impl FnMut(&MetricsRow) + Send,
) -> Result<TrainOutcome> {
    let trainer = Trainer::new(config.clone())?;
    let dir = prepare_output(config)?;
    let writer = match &dir {
        Some(d) => Some(MetricsWriter::create(&d.join("metrics.csv"))?),
        None => None,
    };
    with_thread_pool(|| run(trainer, dir, writer, on_row))?
}

/// Continues the run saved in `checkpoint`. Metrics rows after the
/// checkpoint's step are discarded before new ones are appended.
pub fn resume(config: &RunConfig, checkpoint: &Path) -> Result<TrainOutcome> {
    resume_with(config, checkpoint, |_| {})
}

pub fn resume_with(
    config: &RunConfig,
    checkpoint: &Path,
    on_row: impl FnMut(&MetricsRow) + Send,
) -> Result<TrainOutcome> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let trainer = Trainer::from_checkpoint(config.clone(), ckpt)?;
    let dir = prepare_output(config)?;
    let writer = match &dir {
        Some(d) => {
            let p = d.join("metrics.csv");
            Some(if p.exists() {
                MetricsWriter::resume(&p, trainer.step)?
            } else {
                MetricsWriter::create(&p)?
            })
        }
        None => None,
    };
    with_thread_pool(|| run(trainer, dir, writer, on_row))?
}

fn run(
    mut trainer: Trainer,
    dir: Option<PathBuf>,
    mut writer: Option<MetricsWriter>,
    mut on_row: impl FnMut(&MetricsRow),
) -> Result<TrainOutcome> {
    let n_steps = trainer.config.n_steps;
    let mut history = Vec::with_capacity(n_steps.saturating_sub(trainer.step) as usize);
    let mut last_kl = None;
    while trainer.step < n_steps {
        let rec = trainer.step()?;
        let k = rec.step;
        let kl_due = trainer.is_kl_step(k);
        if trainer.is_eval_step(k) || kl_due {
            let kl = if kl_due {
                let kl = trainer.kl_columns()?;
                last_kl = Some(kl);
                kl
            } else {
                [None; KL_STEP_COLUMNS.len()]
            };
            let row = MetricsRow {
                step: k,
                lr: rec.lr,
                loss_total: rec.loss.total,
                loss_diag: rec.loss.diag,
                loss_sd: rec.loss.distill,
                grad_norm: rec.grad_norm,
                ema_applied: trainer.config.eval_use_ema,
                kl,
            };
            if let Some(w) = writer.as_mut() {
                w.write(&row)?;
            }
            on_row(&row);
        }
        if let Some(d) = &dir {
            let every = trainer.config.checkpoint_every;
            if every > 0 && k % every == 0 {
                trainer
                    .checkpoint()
                    .save(&d.join(format!("ckpt_{k:08}.fmap")))?;
            }
        }
        history.push(rec);
    }
    let checkpoint = trainer.checkpoint();
    if let Some(d) = &dir {
        checkpoint.save(&d.join("final.fmap"))?;
    }
    Ok(TrainOutcome {
        checkpoint,
        history,
        last_kl,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DatasetName;
    use crate::objectives::Method;

    fn tiny(method: Method) -> RunConfig {
        RunConfig {
            method,
            hidden: vec![16, 16],
            weight_hidden: vec![8],
            batch_size: 64,
            n_steps: 6,
            eval_every: 2,
            shard_size: 16,
            ..RunConfig::default()
        }
    }

    #[test]
    fn zero_steps_returns_initialisation() {
        let cfg = RunConfig {
            n_steps: 0,
            ..tiny(Method::Lsd)
        };
        let out = train(&cfg).unwrap();
        let init = cfg
            .build_model()
            .unwrap()
            .init_params(&mut stream(cfg.seed, Stream::Init))
            .unwrap();
        assert_eq!(out.checkpoint.theta, init);
        assert_eq!(out.checkpoint.ema, init);
        assert!(out.history.is_empty());
    }

    #[test]
    fn every_method_takes_finite_steps() {
        for m in [
            Method::Lsd,
            Method::Esd,
            Method::PsdU,
            Method::PsdM,
            Method::Fm,
        ] {
            let out = train(&tiny(m)).unwrap();
            assert_eq!(out.history.len(), 6);
            assert!(out
                .history
                .iter()
                .all(|r| r.loss.total.is_finite() && r.grad_norm.is_finite()));
        }
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let full_dir = dir.path().join("full");
        let cfg = RunConfig {
            output_dir: Some(full_dir.clone()),
            checkpoint_every: 3,
            ..tiny(Method::PsdU)
        };
        let full = train(&cfg).unwrap();
        let metrics = fs::read_to_string(full_dir.join("metrics.csv")).unwrap();
        let final_bytes = fs::read(full_dir.join("final.fmap")).unwrap();

        let resumed = resume(&cfg, &full_dir.join("ckpt_00000003.fmap")).unwrap();
        assert_eq!(resumed.history.len(), 3);
        assert_eq!(resumed.checkpoint, full.checkpoint);
        assert_eq!(
            fs::read_to_string(full_dir.join("metrics.csv")).unwrap(),
            metrics
        );
        assert_eq!(fs::read(full_dir.join("final.fmap")).unwrap(), final_bytes);
    }

    #[test]
    fn resume_rejects_other_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            output_dir: Some(dir.path().to_path_buf()),
            ..tiny(Method::Lsd)
        };
        train(&cfg).unwrap();
        let other = RunConfig { seed: 9, ..cfg };
        let r = resume(&other, &dir.path().join("final.fmap"));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn ema_teacher_state_round_trips() {
        let cfg = RunConfig {
            teacher: TeacherSource::Ema(0.5),
            ..tiny(Method::Lsd)
        };
        let out = train(&cfg).unwrap();
        let t = out.checkpoint.teacher_ema.as_ref().unwrap();
        assert!(t.same_layout(&out.checkpoint.theta));
        assert_ne!(t, &out.checkpoint.theta);
    }

    #[test]
    fn kl_columns_follow_config() {
        let cfg = RunConfig {
            kl_every: 6,
            kl_samples: 2000,
            kl_steps: vec![1, 4],
            ..tiny(Method::Lsd)
        };
        assert_eq!(cfg.dataset, DatasetName::Checkerboard);
        let kl = train(&cfg).unwrap().last_kl.unwrap();
        assert!(kl[0].unwrap().is_finite() && kl[2].unwrap().is_finite());
        assert!(kl[1].is_none() && kl[3].is_none() && kl[4].is_none());
    }
}
