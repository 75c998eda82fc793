//! Deterministic DDIM generation, its exact inversion, and image-to-image
//! translation built from the two.
//!
//! All sampler state is kept in double precision; predictors receive and
//! return `f64` tensors.

use crate::denoiser::NoisePredictor;
use crate::error::{Error, Result};
use crate::schedule::{NoiseSchedule, StepSubsequence};
use crate::tensor::Tensor;

/// Largest batch handed to the predictor in one call.
pub const PREDICT_CHUNK: usize = 64;

/// Calls the predictor on at most [`PREDICT_CHUNK`] items at a time. Every
/// item of `x` is evaluated at the same timestep.
fn predict_at<P: NoisePredictor>(model: &P, x: &Tensor<f64>, t: usize, y: &[usize]) -> Result<Tensor<f64>> {
    let n = x.batch();
    if y.len() != n {
        return Err(Error::Shape { expected: vec![n], got: vec![y.len()] });
    }
    if n <= PREDICT_CHUNK {
        return model.predict(x, &vec![t; n], y);
    }
    let mut parts = Vec::with_capacity(n.div_ceil(PREDICT_CHUNK));
    for start in (0..n).step_by(PREDICT_CHUNK) {
        let idx: Vec<usize> = (start..(start + PREDICT_CHUNK).min(n)).collect();
        parts.push(model.predict(&x.select(&idx), &vec![t; idx.len()], &y[start..start + idx.len()])?);
    }
    Tensor::stack(&parts)
}

fn check_images<P: NoisePredictor>(model: &P, x: &Tensor<f64>, y: &[usize]) -> Result<()> {
    let [c, h, w] = model.image_shape();
    x.ensure_shape([x.batch(), c, h, w])?;
    if y.len() != x.batch() {
        return Err(Error::Shape { expected: vec![x.batch()], got: vec![y.len()] });
    }
    match y.iter().find(|&&l| l >= model.num_conditions()) {
        Some(&label) => Err(Error::Label { label, num_conditions: model.num_conditions() }),
        None => Ok(()),
    }
}

/// `a * x + b * eps`, elementwise.
fn axpby(a: f64, x: &Tensor<f64>, b: f64, eps: &Tensor<f64>) -> Tensor<f64> {
    let mut out = x.clone();
    for (o, &e) in out.data_mut().iter_mut().zip(eps.data()) {
        *o = a * *o + b * e;
    }
    out
}

/// One deterministic generation step from `t_hi` down to `t_lo`.
pub fn ddim_step<P: NoisePredictor>(
    model: &P,
    x_hi: &Tensor<f64>,
    t_hi: usize,
    t_lo: usize,
    y: &[usize],
    schedule: &NoiseSchedule,
) -> Result<Tensor<f64>> {
    let gamma = schedule.gamma(t_hi, t_lo)?;
    let (a_hi, a_lo) = (schedule.alpha_cum(t_hi), schedule.alpha_cum(t_lo));
    let eps = predict_at(model, x_hi, t_hi, y)?;
    Ok(axpby((a_lo / a_hi).sqrt(), x_hi, a_lo.sqrt() * gamma, &eps))
}

/// One inversion step from `t_lo` up to `t_hi`. The prediction is taken at
/// `(x_lo, t_lo)`; at `t_lo = 0` the predictor is queried at `t = 1`, the
/// smallest timestep it was trained on.
pub fn ddim_invert_step<P: NoisePredictor>(
    model: &P,
    x_lo: &Tensor<f64>,
    t_lo: usize,
    t_hi: usize,
    y: &[usize],
    schedule: &NoiseSchedule,
) -> Result<Tensor<f64>> {
    let gamma_bar = schedule.gamma_bar(t_lo, t_hi)?;
    let (a_hi, a_lo) = (schedule.alpha_cum(t_hi), schedule.alpha_cum(t_lo));
    let eps = predict_at(model, x_lo, t_lo.max(1), y)?;
    Ok(axpby((a_hi / a_lo).sqrt(), x_lo, a_hi.sqrt() * gamma_bar, &eps))
}

/// Output of [`ddim_sample`].
#[derive(Clone, Debug, PartialEq)]
pub struct SamplerRun {
    pub subsequence: StepSubsequence,
    pub labels: Vec<usize>,
    pub record_trajectory: bool,
    /// `x_T, ..., x_0` at every retained timestep, when recorded.
    pub trajectory: Option<Vec<Tensor<f64>>>,
    pub output: Tensor<f64>,
}

fn check_subsequence(subsequence: &StepSubsequence, schedule: &NoiseSchedule) -> Result<()> {
    match subsequence.timesteps().last() {
        Some(&t) if t == schedule.len() => Ok(()),
        _ => Err(Error::Schedule(format!(
            "subsequence must end at the schedule length {}",
            schedule.len()
        ))),
    }
}

/// Generates clean images from latents at `t = T` by folding [`ddim_step`]
/// over the subsequence, finishing with a step to `t = 0`.
pub fn ddim_sample<P: NoisePredictor>(
    model: &P,
    x_t: &Tensor<f64>,
    y: &[usize],
    subsequence: &StepSubsequence,
    schedule: &NoiseSchedule,
    record: bool,
) -> Result<SamplerRun> {
    check_subsequence(subsequence, schedule)?;
    check_images(model, x_t, y)?;
    let mut trajectory = record.then(|| vec![x_t.clone()]);
    let mut x = x_t.clone();
    for &(lo, hi) in subsequence.ascending_pairs().iter().rev() {
        x = ddim_step(model, &x, hi, lo, y, schedule)?;
        if let Some(tr) = trajectory.as_mut() {
            tr.push(x.clone());
        }
    }
    Ok(SamplerRun {
        subsequence: subsequence.clone(),
        labels: y.to_vec(),
        record_trajectory: record,
        trajectory,
        output: x,
    })
}

/// Maps clean images to their latents at `t = T` under labels `y`.
pub fn ddim_invert<P: NoisePredictor>(
    model: &P,
    x_0: &Tensor<f64>,
    y: &[usize],
    subsequence: &StepSubsequence,
    schedule: &NoiseSchedule,
) -> Result<Tensor<f64>> {
    check_subsequence(subsequence, schedule)?;
    check_images(model, x_0, y)?;
    let mut x = x_0.clone();
    for &(lo, hi) in &subsequence.ascending_pairs() {
        x = ddim_invert_step(model, &x, lo, hi, y, schedule)?;
    }
    Ok(x)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TranslationResult {
    pub source: Tensor<f64>,
    pub source_labels: Vec<usize>,
    pub latent: Tensor<f64>,
    /// One batch per requested target label, aligned with `source`.
    pub targets: Vec<(usize, Tensor<f64>)>,
    /// Regeneration under the source labels.
    pub reconstruction: Tensor<f64>,
}

impl TranslationResult {
    pub fn target(&self, label: usize) -> Option<&Tensor<f64>> {
        self.targets.iter().find(|(l, _)| *l == label).map(|(_, x)| x)
    }
}

/// Generates every latent under every label in `labels` with a single
/// sampling pass. Returns one batch per label.
fn fan_out<P: NoisePredictor>(
    model: &P,
    latent: &Tensor<f64>,
    labels: &[usize],
    subsequence: &StepSubsequence,
    schedule: &NoiseSchedule,
) -> Result<Vec<Tensor<f64>>> {
    let n = latent.batch();
    if labels.is_empty() || n == 0 {
        return Ok(labels.iter().map(|_| latent.select(&[])).collect());
    }
    let tiled = Tensor::stack(&vec![latent.clone(); labels.len()])?;
    let y: Vec<usize> = labels.iter().flat_map(|&l| std::iter::repeat_n(l, n)).collect();
    let out = ddim_sample(model, &tiled, &y, subsequence, schedule, false)?.output;
    Ok((0..labels.len()).map(|k| out.select(&(k * n..(k + 1) * n).collect::<Vec<_>>())).collect())
}

/// Inverts each source under its own label once, then regenerates the shared
/// latent under every target label and under the source label.
pub fn translate<P: NoisePredictor>(
    model: &P,
    x_0: &Tensor<f64>,
    source_labels: &[usize],
    targets: &[usize],
    subsequence: &StepSubsequence,
    schedule: &NoiseSchedule,
) -> Result<TranslationResult> {
    if let Some(&label) = targets.iter().find(|&&l| l >= model.num_conditions()) {
        return Err(Error::Label { label, num_conditions: model.num_conditions() });
    }
    let latent = ddim_invert(model, x_0, source_labels, subsequence, schedule)?;
    let mut generated = fan_out(model, &latent, targets, subsequence, schedule)?;
    let reconstruction = ddim_sample(model, &latent, source_labels, subsequence, schedule, false)?.output;
    Ok(TranslationResult {
        source: x_0.clone(),
        source_labels: source_labels.to_vec(),
        latent,
        targets: targets.iter().copied().zip(generated.drain(..)).collect(),
        reconstruction,
    })
}

/// One treatment's concentration series, lowest concentration first.
#[derive(Clone, Debug, PartialEq)]
pub struct DoseSeries {
    pub treatment: String,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DoseRow {
    pub treatment: String,
    pub labels: Vec<usize>,
    /// One single-image tensor per concentration.
    pub images: Vec<Tensor<f64>>,
}

/// Translations of one source image: one row per treatment, one column per
/// concentration.
#[derive(Clone, Debug, PartialEq)]
pub struct DoseGrid {
    pub source: Tensor<f64>,
    pub source_label: usize,
    pub rows: Vec<DoseRow>,
}

pub fn dose_grid<P: NoisePredictor>(
    model: &P,
    x_0: &Tensor<f64>,
    source_label: usize,
    treatments: &[DoseSeries],
    subsequence: &StepSubsequence,
    schedule: &NoiseSchedule,
) -> Result<DoseGrid> {
    if x_0.batch() != 1 {
        return Err(Error::Shape { expected: vec![1], got: vec![x_0.batch()] });
    }
    let labels: Vec<usize> = treatments.iter().flat_map(|s| s.labels.iter().copied()).collect();
    let result = translate(model, x_0, &[source_label], &labels, subsequence, schedule)?;
    let mut cells = result.targets.into_iter().map(|(_, x)| x);
    let rows = treatments
        .iter()
        .map(|s| DoseRow {
            treatment: s.treatment.clone(),
            labels: s.labels.clone(),
            images: cells.by_ref().take(s.labels.len()).collect(),
        })
        .collect();
    Ok(DoseGrid { source: x_0.clone(), source_label, rows })
}
