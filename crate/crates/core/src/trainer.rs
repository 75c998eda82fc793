//! Training loop: Adam on the noise-prediction loss with global-norm
//! gradient clipping, an exponential moving average of the weights, periodic
//! checkpoints and a per-step loss log.
//!
//! Output directory layout:
//!
//! ```text
//! config.toml                   resolved training config
//! loss.csv                      step,wall_time,loss
//! step-00001000-live.ckpt       periodic checkpoints (every `checkpoint_every` steps)
//! step-00001000-ema.ckpt
//! final-live.ckpt
//! final-ema.ckpt
//! ```

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointHeader, WeightKind};
use crate::data::{load_dataset, Dataset, Split, MANIFEST_FILE};
use crate::denoiser::{Architecture, ConditionalDenoiser, DenoiserConfig};
use crate::diffusion::loss_and_grad;
use crate::error::{Error, Result};
use crate::files;
use crate::nn::ParamStore;
use crate::schedule::{NoiseSchedule, ScheduleParams};
use crate::seed;
use crate::tensor::Scalar;

pub const CONFIG_FILE: &str = "config.toml";
pub const LOSS_FILE: &str = "loss.csv";

const STREAM_SHUFFLE: u64 = 10;
const STREAM_NOISE: u64 = 11;
const STREAM_FLIP: u64 = 12;
const STREAM_INIT: u64 = 13;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub ema_decay: f64,
    pub seed: u64,
    /// Steps between periodic checkpoints; 0 writes only the final pair.
    pub checkpoint_every: u64,
    /// Stops after this many optimizer steps in total, if set.
    pub max_steps: Option<u64>,
    /// Global gradient norm limit.
    pub grad_clip: f64,
    /// Random horizontal and vertical flips of training images.
    pub flip_augment: bool,
    pub schedule: ScheduleParams,
    pub architecture: Architecture,
    /// Dataset manifest, or a directory containing `manifest.toml`.
    pub dataset: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 32,
            learning_rate: 1e-4,
            ema_decay: 0.999,
            seed: 0,
            checkpoint_every: 0,
            max_steps: None,
            grad_clip: 1.0,
            flip_augment: false,
            schedule: ScheduleParams::default(),
            architecture: Architecture::default(),
            dataset: PathBuf::from("data"),
            output_dir: PathBuf::from("run"),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad("ema_decay must lie in [0, 1)");
        }
        if self.grad_clip.is_nan() || self.grad_clip <= 0.0 {
            return bad("grad_clip must be positive");
        }
        NoiseSchedule::from_params(&self.schedule).map(|_| ())
    }

    pub fn manifest_path(&self) -> PathBuf {
        if self.dataset.is_dir() {
            self.dataset.join(MANIFEST_FILE)
        } else {
            self.dataset.clone()
        }
    }
}

/// `ema <- decay * ema + (1 - decay) * live`, elementwise.
pub fn ema_update<T: Scalar>(ema: &mut ParamStore<T>, live: &ParamStore<T>, decay: f64) -> Result<()> {
    if !(0.0..1.0).contains(&decay) {
        return Err(Error::Config(format!("ema decay {decay} outside [0, 1)")));
    }
    ema.ensure_same_layout(live)?;
    let (d, w) = (T::of(decay), T::of(1.0 - decay));
    for (e, l) in ema.iter_mut().zip(live.iter()) {
        for (a, &b) in e.data.iter_mut().zip(&l.data) {
            *a = d * *a + w * b;
        }
    }
    Ok(())
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|p| p.data.iter()).map(|v| v.f64() * v.f64()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        for p in grads.iter_mut() {
            for v in &mut p.data {
                *v *= s;
            }
        }
    }
    norm
}

/// Adam without weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: ParamStore<f32>,
    v: ParamStore<f32>,
    t: u64,
}

impl Adam {
    pub fn new(like: &ParamStore<f32>) -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: like.zeros_like(), v: like.zeros_like(), t: 0 }
    }

    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &ParamStore<f32>, lr: f64) -> Result<()> {
        params.ensure_same_layout(grads)?;
        self.t += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = (lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        for (((p, g), m), v) in params.iter_mut().zip(grads.iter()).zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = b1 * m.data[i] + (1.0 - b1) * gi;
                v.data[i] = b2 * v.data[i] + (1.0 - b2) * gi * gi;
                p.data[i] -= step * m.data[i] / (v.data[i].sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub live: ConditionalDenoiser<f32>,
    pub ema: ConditionalDenoiser<f32>,
    pub conditions: Vec<String>,
    pub schedule: ScheduleParams,
    pub losses: Vec<LossRecord>,
}

impl TrainState {
    /// Fresh model for `data`, initialized from the config seed. The EMA
    /// starts equal to the live weights.
    pub fn init(config: &TrainConfig, data: &Dataset) -> Result<Self> {
        let dc = DenoiserConfig::from_architecture(
            &config.architecture,
            data.manifest.image_shape(),
            data.manifest.conditions.len(),
            config.schedule.timesteps,
        )?;
        let live = ConditionalDenoiser::init(dc, seed::derive(config.seed, &[STREAM_INIT]))?;
        Ok(TrainState {
            step: 0,
            ema: live.clone(),
            live,
            conditions: data.manifest.condition_names(),
            schedule: config.schedule,
            losses: Vec::new(),
        })
    }

    /// Continues from a live/EMA checkpoint pair. Optimizer moments are not
    /// stored and restart from zero.
    pub fn resume(live: Checkpoint, ema: Checkpoint) -> Result<Self> {
        if live.header.kind != WeightKind::Live || ema.header.kind != WeightKind::Ema {
            return Err(Error::Checkpoint("resume needs a live and an ema checkpoint".into()));
        }
        let (h, e) = (&live.header, &ema.header);
        if (h.step, &h.conditions, &h.schedule, &h.denoiser) != (e.step, &e.conditions, &e.schedule, &e.denoiser) {
            return Err(Error::Checkpoint("live and ema checkpoints do not belong together".into()));
        }
        Ok(TrainState {
            step: h.step,
            conditions: h.conditions.clone(),
            schedule: h.schedule,
            live: live.model,
            ema: ema.model,
            losses: Vec::new(),
        })
    }

    pub fn checkpoint(&self, kind: WeightKind) -> Result<Checkpoint> {
        let model = match kind {
            WeightKind::Live => &self.live,
            WeightKind::Ema => &self.ema,
        };
        let header = CheckpointHeader {
            kind,
            step: self.step,
            conditions: self.conditions.clone(),
            schedule: self.schedule,
            denoiser: model.config().clone(),
        };
        Checkpoint::new(header, model.clone())
    }

    /// Writes `{prefix}-live.ckpt` and `{prefix}-ema.ckpt` into `dir`.
    pub fn save_pair(&self, dir: &Path, prefix: &str) -> Result<[PathBuf; 2]> {
        let mut out = [PathBuf::new(), PathBuf::new()];
        for (slot, kind) in out.iter_mut().zip([WeightKind::Live, WeightKind::Ema]) {
            *slot = dir.join(format!("{prefix}-{}.ckpt", kind.suffix()));
            self.checkpoint(kind)?.save(slot)?;
        }
        Ok(out)
    }
}

pub fn checkpoint_pair_paths(dir: &Path, prefix: &str) -> [PathBuf; 2] {
    [dir.join(format!("{prefix}-live.ckpt")), dir.join(format!("{prefix}-ema.ckpt"))]
}

struct LossLog {
    out: BufWriter<File>,
    path: PathBuf,
}

impl LossLog {
    fn open(path: &Path, fresh: bool) -> Result<Self> {
        let exists = path.exists();
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(!fresh)
            .write(true)
            .truncate(fresh)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut log = LossLog { out: BufWriter::new(file), path: path.to_path_buf() };
        if fresh || !exists {
            log.write_line("step,wall_time,loss")?;
        }
        Ok(log)
    }

    fn write_line(&mut self, line: &str) -> Result<()> {
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Where [`train`] writes its artifacts.
pub struct TrainOutput<'a> {
    pub dir: &'a Path,
    /// Truncate `loss.csv` instead of appending to it.
    pub fresh_log: bool,
}

/// Runs `config.epochs` passes over `data` (or until `config.max_steps`),
/// starting from `state`.
///
/// Each epoch is shuffled with a seed derived from the root seed and the
/// step count at the start of the epoch; each step draws timesteps and noise
/// from a seed derived from the root seed and the step number. A non-finite
/// loss or parameter aborts the run with the offending step.
pub fn train(
    config: &TrainConfig,
    data: &Dataset,
    mut state: TrainState,
    output: Option<TrainOutput<'_>>,
    mut progress: impl FnMut(&TrainState),
) -> Result<TrainState> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let num_conditions = state.live.config().num_conditions;
    if let Some(&label) = data.labels.iter().find(|&&l| l >= num_conditions) {
        return Err(Error::Label { label, num_conditions });
    }
    if state.schedule != config.schedule {
        return Err(Error::Config("schedule differs from the one the model was trained with".into()));
    }
    let schedule = NoiseSchedule::from_params(&config.schedule)?;
    let mut log = match &output {
        Some(o) => {
            files::create_dir_all(o.dir)?;
            Some(LossLog::open(&o.dir.join(LOSS_FILE), o.fresh_log)?)
        }
        None => None,
    };
    let mut adam = Adam::new(state.live.params());
    let start = Instant::now();
    let reached = |s: &TrainState| config.max_steps.is_some_and(|m| s.step >= m);
    'epochs: for _ in 0..config.epochs {
        if reached(&state) {
            break;
        }
        let epoch_key = state.step;
        let shuffle = seed::derive(config.seed, &[STREAM_SHUFFLE, epoch_key]);
        let flips = config.flip_augment.then(|| seed::derive(config.seed, &[STREAM_FLIP, epoch_key]));
        for batch in data.batches(config.batch_size, Some(shuffle), flips) {
            if reached(&state) {
                break 'epochs;
            }
            let step = state.step + 1;
            let noise_seed = seed::derive(config.seed, &[STREAM_NOISE, step]);
            let (report, mut grads) = loss_and_grad(&state.live, &batch, &schedule, noise_seed)?;
            if !report.loss.is_finite() {
                return Err(Error::NonFiniteLoss { step, loss: report.loss });
            }
            clip_global_norm(&mut grads, config.grad_clip);
            adam.step(state.live.params_mut(), &grads, config.learning_rate)?;
            if !state.live.params().all_finite() {
                return Err(Error::NonFiniteLoss { step, loss: report.loss });
            }
            ema_update(state.ema.params_mut(), state.live.params(), config.ema_decay)?;
            state.step = step;
            state.losses.push(LossRecord { step, loss: report.loss });
            if let Some(l) = log.as_mut() {
                l.write_line(&format!("{step},{:.3},{}", start.elapsed().as_secs_f64(), report.loss))?;
            }
            if let Some(o) = &output {
                if config.checkpoint_every > 0 && step.is_multiple_of(config.checkpoint_every) {
                    state.save_pair(o.dir, &format!("step-{step:08}"))?;
                    if let Some(l) = log.as_mut() {
                        l.flush()?;
                    }
                }
            }
            progress(&state);
        }
    }
    if let Some(l) = log.as_mut() {
        l.flush()?;
    }
    if let Some(o) = &output {
        state.save_pair(o.dir, "final")?;
    }
    Ok(state)
}

/// Loads the dataset named by `config`, initializes or resumes, trains, and
/// writes everything under `config.output_dir`, starting with the resolved
/// config.
pub fn run(config: &TrainConfig, resume: Option<&Path>, progress: impl FnMut(&TrainState)) -> Result<TrainState> {
    config.validate()?;
    let data = load_dataset(&config.manifest_path(), Split::Train)?;
    let state = match resume {
        Some(live_path) => {
            let live = Checkpoint::load(live_path)?;
            let ema_path = sibling_ema(live_path)?;
            let state = TrainState::resume(live, Checkpoint::load(&ema_path)?)?;
            if state.conditions != data.manifest.condition_names() {
                return Err(Error::Config("checkpoint conditions differ from the dataset's".into()));
            }
            state
        }
        None => TrainState::init(config, &data)?,
    };
    files::create_dir_all(&config.output_dir)?;
    files::write_toml(&config.output_dir.join(CONFIG_FILE), config)?;
    train(config, &data, state, Some(TrainOutput { dir: &config.output_dir, fresh_log: resume.is_none() }), progress)
}

/// The EMA checkpoint saved next to a `-live.ckpt` file.
pub fn sibling_ema(live: &Path) -> Result<PathBuf> {
    let name = live.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    match name.strip_suffix("-live.ckpt") {
        Some(prefix) => Ok(live.with_file_name(format!("{prefix}-ema.ckpt"))),
        None => Err(Error::Config(format!("{} is not a -live.ckpt file", live.display()))),
    }
}
