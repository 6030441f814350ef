//! Optimisation loop: Adam, global-norm clipping, EMA shadow weights,
//! checkpoint/resume and EMA validation.
//!
//! Each step draws its batch from `stream(seed, TrainStep, step)`, so a run
//! resumed from a checkpoint at step `k` continues exactly as if uninterrupted.

use std::io::Write;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{Checkpoint, CheckpointDtype, DifferentiableField, FieldError, FieldNetwork};
use crate::frontend::{compress, peak_normalize, FrontendConfig, FrontendError, Stft, Waveform};
use crate::metrics::{si_sdr, MetricsError};
use crate::objective::{
    loss_and_grads, sample_times, LossReport, ObjectiveConfig, ObjectiveError, TargetMutation,
    TrainingBatch,
};
use crate::path::{PathConfig, PathError, PathSample};
use crate::rng::{normal_tensor, stream, Domain};
use crate::sampler::{Pipeline, SamplerConfig, SamplerError};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("non-finite loss at step {step}: {report}; batch {batch}")]
    NonFinite {
        step: u64,
        report: String,
        batch: String,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Path(#[from] PathError),
    #[error(transparent)]
    Frontend(#[from] FrontendError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Peak learning rate.
    pub lr: f64,
    /// Cosine decay from `lr` at step 0 to `lr * lr_final_fraction` at `steps`;
    /// 1 keeps the rate constant.
    pub lr_final_fraction: f64,
    pub ema_decay: f64,
    pub grad_clip_norm: f64,
    /// Rows (STFT frames) per step.
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    /// 0 disables periodic validation.
    pub validate_every: u64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            lr_final_fraction: 0.05,
            ema_decay: 0.999,
            grad_clip_norm: 1.0,
            batch_size: 128,
            steps: 20_000,
            seed: 0,
            checkpoint_every: 5_000,
            validate_every: 1_000,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!(
                "lr must be > 0, got {}",
                self.lr
            )));
        }
        if !(self.lr_final_fraction > 0.0 && self.lr_final_fraction <= 1.0) {
            return Err(TrainError::Config(format!(
                "lr_final_fraction must lie in (0, 1], got {}",
                self.lr_final_fraction
            )));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(TrainError::Config(format!(
                "ema_decay must lie in (0, 1), got {}",
                self.ema_decay
            )));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(TrainError::Config(format!(
                "grad_clip_norm must be > 0, got {}",
                self.grad_clip_norm
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be > 0".into()));
        }
        Ok(())
    }

    /// Learning rate for the update that follows `step` completed steps.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.steps == 0 {
            return self.lr;
        }
        let progress = (step as f64 / self.steps as f64).min(1.0);
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.lr * (self.lr_final_fraction + (1.0 - self.lr_final_fraction) * cosine)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    /// Bias-corrected update; `t` is the 1-based step index.
    pub fn update(
        &self,
        params: &mut [Tensor],
        grads: &[Tensor],
        m: &mut [Tensor],
        v: &mut [Tensor],
        t: u64,
        lr: f64,
    ) {
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their joint ℓ2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// `ema ← ema + (1 − decay)(p − ema)`, exact when `ema == p`.
pub fn ema_update(ema: &mut [Tensor], params: &[Tensor], decay: f64) {
    for (e, p) in ema.iter_mut().zip(params) {
        for (e, &p) in e.data_mut().iter_mut().zip(p.data()) {
            *e += (1.0 - decay) * (p - *e);
        }
    }
}

/// Field parameters plus optimiser and EMA state.
#[derive(Debug, Clone)]
pub struct TrainState<F> {
    pub field: F,
    pub ema: Vec<Tensor>,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Completed steps.
    pub step: u64,
    pub seed: u64,
    /// EMA weights with the best validation score so far.
    pub best: Option<BestSnapshot>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestSnapshot {
    pub report: ValidationReport,
    pub ema: Vec<Tensor>,
}

impl<F: DifferentiableField> TrainState<F> {
    pub fn new(field: F, seed: u64) -> Self {
        let zeros: Vec<Tensor> = field
            .params()
            .iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect();
        Self {
            ema: field.params().to_vec(),
            m: zeros.clone(),
            v: zeros,
            field,
            step: 0,
            seed,
            best: None,
        }
    }

    /// Keeps the current EMA weights if `report` beats the stored best.
    pub fn offer_best(&mut self, report: &ValidationReport) -> bool {
        let better = self
            .best
            .as_ref()
            .is_none_or(|b| report.si_sdr_db > b.report.si_sdr_db);
        if better {
            self.best = Some(BestSnapshot {
                report: report.clone(),
                ema: self.ema.clone(),
            });
        }
        better
    }

    /// Weights for inference: the best validated snapshot, else the current EMA.
    pub fn selected_weights(&self) -> &[Tensor] {
        self.best.as_ref().map_or(&self.ema, |b| &b.ema)
    }

    /// Clip, Adam step and EMA update with externally supplied gradients.
    pub fn apply_gradients(&mut self, mut grads: Vec<Tensor>, cfg: &TrainConfig, lr: f64) -> f64 {
        let norm = clip_global_norm(&mut grads, cfg.grad_clip_norm);
        self.step += 1;
        Adam::default().update(
            self.field.params_mut(),
            &grads,
            &mut self.m,
            &mut self.v,
            self.step,
            lr,
        );
        ema_update(&mut self.ema, self.field.params(), cfg.ema_decay);
        norm
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    #[serde(flatten)]
    pub loss: LossReport,
    pub grad_norm: f64,
}

/// One optimisation step on `batch`; the step index seen by the curriculum is the
/// number of steps completed before this one.
pub fn train_step<F: DifferentiableField>(
    state: &mut TrainState<F>,
    batch: &TrainingBatch,
    objective: &ObjectiveConfig,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<StepReport> {
    if !batch.all_finite() {
        return Err(TrainError::NonFinite {
            step: state.step,
            report: "non-finite inputs".into(),
            batch: batch.describe(),
        });
    }
    let (loss, grads) = loss_and_grads(
        &state.field,
        batch,
        objective,
        state.step,
        TargetMutation::None,
    )?;
    if !loss.is_finite() || !grads.iter().all(Tensor::all_finite) {
        return Err(TrainError::NonFinite {
            step: state.step,
            report: format!("{loss:?}"),
            batch: batch.describe(),
        });
    }
    let grad_norm = state.apply_gradients(grads, cfg, lr);
    Ok(StepReport {
        step: state.step,
        loss,
        grad_norm,
    })
}

/// Peak-normalised training waveforms, framed on demand.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    stft: Stft,
    clean: Vec<Vec<f64>>,
    noisy: Vec<Vec<f64>>,
    frames: Vec<usize>,
}

impl TrainingSet {
    pub fn new(pairs: &[(Waveform, Waveform)], frontend: &FrontendConfig) -> Result<Self> {
        if pairs.is_empty() {
            return Err(TrainError::EmptyCorpus);
        }
        let stft = Stft::new(frontend)?;
        let mut set = Self {
            stft,
            clean: Vec::new(),
            noisy: Vec::new(),
            frames: Vec::new(),
        };
        for (clean, noisy) in pairs {
            let (n, c, _) = peak_normalize(noisy, clean)?;
            set.frames.push(set.stft.frame_count(n.len()));
            set.clean.push(c.into_samples());
            set.noisy.push(n.into_samples());
        }
        Ok(set)
    }

    pub fn dim(&self) -> usize {
        2 * self.stft.config().bins()
    }

    pub fn len(&self) -> usize {
        self.clean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean.is_empty()
    }

    /// Compressed `(x1, y)` frame rows in the interleaved layout of the field input.
    pub fn frame(&self, utt: usize, frame: usize) -> (Vec<f64>, Vec<f64>) {
        let bins = self.stft.config().bins();
        let mut buf = vec![Complex64::new(0.0, 0.0); bins];
        let mut row = |samples: &[f64]| {
            self.stft.analyze_frame(samples, frame, &mut buf);
            buf.iter()
                .flat_map(|&z| {
                    let c = compress(z);
                    [c.re, c.im]
                })
                .collect::<Vec<f64>>()
        };
        (row(&self.clean[utt]), row(&self.noisy[utt]))
    }

    /// Random frames, path samples and `(r, t)` pairs for the given step.
    pub fn batch<R: Rng + ?Sized>(
        &self,
        rows: usize,
        path: &PathConfig,
        objective: &ObjectiveConfig,
        step: u64,
        rng: &mut R,
    ) -> Result<TrainingBatch> {
        let d = self.dim();
        let (mut xt, mut yy, mut vt) = (
            Vec::with_capacity(rows * d),
            Vec::with_capacity(rows * d),
            Vec::with_capacity(rows * d),
        );
        let (mut rs, mut ts) = (Vec::with_capacity(rows), Vec::with_capacity(rows));
        for _ in 0..rows {
            let utt = rng.gen_range(0..self.len());
            let frame = rng.gen_range(0..self.frames[utt]);
            let (x1, y) = self.frame(utt, frame);
            let (r, t) = sample_times(step, objective, rng);
            let x1 = Tensor::new(vec![1, d], x1)?;
            let y = Tensor::new(vec![1, d], y)?;
            let z = normal_tensor(&[1, d], rng);
            let s = PathSample::mean_flow_with_noise(path, &x1, &y, t, z)?;
            xt.extend_from_slice(s.x_t.data());
            vt.extend_from_slice(s.v_t.data());
            yy.extend_from_slice(y.data());
            rs.push(r);
            ts.push(t);
        }
        Ok(TrainingBatch::new(
            Tensor::new(vec![rows, d], xt)?,
            Tensor::new(vec![rows, d], yy)?,
            Tensor::new(vec![rows, d], vt)?,
            rs,
            ts,
        )?)
    }
}

/// Everything the loop needs besides data.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainSetup {
    pub train: TrainConfig,
    pub objective: ObjectiveConfig,
    pub path: PathConfig,
    pub frontend: FrontendConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub step: u64,
    pub si_sdr_db: f64,
    pub noisy_si_sdr_db: f64,
}

impl ValidationReport {
    pub fn gain_db(&self) -> f64 {
        self.si_sdr_db - self.noisy_si_sdr_db
    }
}

/// Mean single-step SI-SDR of `net` on `(clean, noisy)` pairs.
pub fn validate(
    net: &FieldNetwork,
    pairs: &[(Waveform, Waveform)],
    setup: &TrainSetup,
    step: u64,
) -> Result<ValidationReport> {
    if pairs.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let pipeline = Pipeline {
        frontend: crate::frontend::Frontend::new(&setup.frontend)?,
        path: setup.path.clone(),
        sampler: SamplerConfig::default(),
    };
    let (mut est, mut base) = (0.0, 0.0);
    for (i, (clean, noisy)) in pairs.iter().enumerate() {
        let mut rng = stream(setup.train.seed, Domain::Enhance, i as u64);
        let (out, _) = pipeline.run(net, noisy, &mut rng)?;
        est += si_sdr(&out, clean)?;
        base += si_sdr(noisy, clean)?;
    }
    let n = pairs.len() as f64;
    Ok(ValidationReport {
        step,
        si_sdr_db: est / n,
        noisy_si_sdr_db: base / n,
    })
}

/// Line written to the training log.
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogRecord<'a> {
    Step(&'a StepReport),
    Validation(&'a ValidationReport),
    Checkpoint { step: u64, path: &'a Path },
}

#[derive(Default)]
pub struct FitOptions<'a> {
    pub validation: Option<&'a [(Waveform, Waveform)]>,
    pub checkpoint_dir: Option<&'a Path>,
    pub log: Option<&'a mut dyn Write>,
    /// Stop early after this step, leaving the schedule for `steps` intact.
    pub stop_after: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub state: TrainState<FieldNetwork>,
    pub last_step: Option<StepReport>,
    pub validations: Vec<ValidationReport>,
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step-{step:07}.mfnn"))
}

pub const LATEST_CHECKPOINT: &str = "latest.mfnn";

impl TrainState<FieldNetwork> {
    /// Weights, EMA, Adam moments and the best snapshot; metadata records `step`, `seed` and `best`.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_network(&self.field, Some(&self.ema));
        for (n, (m, v)) in self
            .field
            .param_names()
            .iter()
            .zip(self.m.iter().zip(&self.v))
        {
            ck.push(format!("adam_m/{n}"), m.clone());
            ck.push(format!("adam_v/{n}"), v.clone());
        }
        if let Some(best) = &self.best {
            for (n, t) in self.field.param_names().iter().zip(&best.ema) {
                ck.push(format!("best/{n}"), t.clone());
            }
        }
        if let Some(meta) = ck.meta.as_object_mut() {
            meta.insert("step".into(), self.step.into());
            meta.insert("seed".into(), self.seed.into());
            if let Some(best) = &self.best {
                meta.insert(
                    "best".into(),
                    serde_json::to_value(&best.report).unwrap_or_default(),
                );
            }
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let field = ck.to_network("param")?;
        let names = field.param_names();
        let meta_u64 = |k: &str| {
            ck.meta
                .get(k)
                .and_then(serde_json::Value::as_u64)
                .ok_or_else(|| TrainError::Checkpoint(format!("metadata lacks `{k}`")))
        };
        let best = match ck.meta.get("best") {
            None => None,
            Some(v) => Some(BestSnapshot {
                report: serde_json::from_value(v.clone())?,
                ema: ck.group("best", &names)?,
            }),
        };
        Ok(Self {
            ema: ck.group("ema", &names)?,
            m: ck.group("adam_m", &names)?,
            v: ck.group("adam_v", &names)?,
            step: meta_u64("step")?,
            seed: meta_u64("seed")?,
            best,
            field,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_checkpoint().save(path, CheckpointDtype::F64)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Network carrying the EMA weights.
    pub fn ema_network(&self) -> Result<FieldNetwork> {
        Ok(self.field.with_params(&self.ema)?)
    }

    /// Network carrying [`TrainState::selected_weights`].
    pub fn selected_network(&self) -> Result<FieldNetwork> {
        Ok(self.field.with_params(self.selected_weights())?)
    }
}

fn log_line(log: &mut Option<&mut dyn Write>, rec: &LogRecord<'_>) -> Result<()> {
    if let Some(w) = log.as_mut() {
        serde_json::to_writer(&mut **w, rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Runs steps until `state.step == setup.train.steps`.
pub fn fit(
    mut state: TrainState<FieldNetwork>,
    setup: &TrainSetup,
    data: &TrainingSet,
    mut opts: FitOptions<'_>,
) -> Result<FitOutcome> {
    setup.train.validate()?;
    setup.objective.validate()?;
    setup.path.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    if data.dim() != DifferentiableField::dim(&state.field) {
        return Err(TrainError::Config(format!(
            "network dim {} does not match frame dim {}",
            DifferentiableField::dim(&state.field),
            data.dim()
        )));
    }
    let cfg = &setup.train;
    let mut last_step = None;
    let mut validations = Vec::new();
    let end = opts.stop_after.map_or(cfg.steps, |s| s.min(cfg.steps));
    while state.step < end {
        let mut rng = stream(state.seed, Domain::TrainStep, state.step);
        let batch = data.batch(
            cfg.batch_size,
            &setup.path,
            &setup.objective,
            state.step,
            &mut rng,
        )?;
        let lr = cfg.lr_at(state.step);
        let rep = train_step(&mut state, &batch, &setup.objective, cfg, lr)?;
        let s = state.step;
        if cfg.log_every > 0 && (s.is_multiple_of(cfg.log_every) || s == cfg.steps) {
            log_line(&mut opts.log, &LogRecord::Step(&rep))?;
        }
        last_step = Some(rep);
        if let (Some(val), true) = (
            opts.validation,
            cfg.validate_every > 0 && (s.is_multiple_of(cfg.validate_every) || s == cfg.steps),
        ) {
            let v = validate(&state.ema_network()?, val, setup, s)?;
            state.offer_best(&v);
            log_line(&mut opts.log, &LogRecord::Validation(&v))?;
            validations.push(v);
        }
        if let (Some(dir), true) = (
            opts.checkpoint_dir,
            cfg.checkpoint_every > 0 && (s.is_multiple_of(cfg.checkpoint_every) || s == cfg.steps),
        ) {
            std::fs::create_dir_all(dir)?;
            let path = checkpoint_path(dir, s);
            state.save(&path)?;
            std::fs::copy(&path, dir.join(LATEST_CHECKPOINT))?;
            log_line(
                &mut opts.log,
                &LogRecord::Checkpoint {
                    step: s,
                    path: &path,
                },
            )?;
        }
    }
    Ok(FitOutcome {
        state,
        last_step,
        validations,
    })
}
