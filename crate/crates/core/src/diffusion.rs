//! Forward noising through the closed-form marginal and the simplified
//! noise-prediction objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::denoiser::{ConditionalDenoiser, NoisePredictor};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::schedule::NoiseSchedule;
use crate::tensor::{Scalar, Tensor};

/// Clean images in `[-1, 1]` with their condition labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    pub pixels: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl ImageBatch {
    pub fn new(pixels: Tensor<f32>, labels: Vec<usize>) -> Result<Self> {
        if pixels.batch() != labels.len() {
            return Err(Error::Shape { expected: vec![pixels.batch()], got: vec![labels.len()] });
        }
        Ok(ImageBatch { pixels, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn check_labels(&self, num_conditions: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l >= num_conditions) {
            Some(&label) => Err(Error::Label { label, num_conditions }),
            None => Ok(()),
        }
    }
}

/// Standard normal noise drawn from a ChaCha8 stream seeded with `seed`,
/// filled in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw {
    pub epsilon: Tensor<f64>,
    pub seed: u64,
}

impl NoiseDraw {
    pub fn sample(shape: [usize; 4], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        NoiseDraw { epsilon: standard_normal(shape, &mut rng), seed }
    }
}

pub(crate) fn standard_normal(shape: [usize; 4], rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

/// `sqrt(a_t) * x0 + sqrt(1 - a_t) * eps`, each item with its own `t`.
pub fn forward_noise<T: Scalar>(
    x0: &Tensor<T>,
    t: &[usize],
    eps: &Tensor<T>,
    schedule: &NoiseSchedule,
) -> Result<Tensor<T>> {
    eps.ensure_shape(x0.shape())?;
    if t.len() != x0.batch() {
        return Err(Error::Shape { expected: vec![x0.batch()], got: vec![t.len()] });
    }
    let mut out = Tensor::zeros(x0.shape());
    for (i, &ti) in t.iter().enumerate() {
        schedule.check_timestep(ti)?;
        let a = schedule.alpha_cum(ti);
        let (sa, sn) = (T::of(a.sqrt()), T::of((1.0 - a).sqrt()));
        for ((o, &x), &e) in out.item_mut(i).iter_mut().zip(x0.item(i)).zip(eps.item(i)) {
            *o = sa * x + sn * e;
        }
    }
    Ok(out)
}

/// Timesteps and noise for one loss evaluation. Timesteps are drawn first,
/// uniformly from `1..=T`, then the noise, from one ChaCha8 stream.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingDraw {
    pub timesteps: Vec<usize>,
    pub noise: NoiseDraw,
}

impl TrainingDraw {
    pub fn sample(shape: [usize; 4], total: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let timesteps = (0..shape[0]).map(|_| rng.gen_range(1..=total)).collect();
        let epsilon = standard_normal(shape, &mut rng);
        TrainingDraw { timesteps, noise: NoiseDraw { epsilon, seed } }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    /// Mean over batch and pixels of the squared prediction error.
    pub loss: f64,
    pub timesteps: Vec<usize>,
    /// Per-item mean squared error.
    pub item_losses: Vec<f64>,
}

fn check_batch(batch: &ImageBatch, shape: [usize; 3], num_conditions: usize) -> Result<()> {
    let [c, h, w] = shape;
    batch.pixels.ensure_shape([batch.len(), c, h, w])?;
    batch.check_labels(num_conditions)
}

/// Noise-prediction loss of any predictor on a batch, deterministic in `seed`.
pub fn training_loss<P: NoisePredictor>(
    predictor: &P,
    batch: &ImageBatch,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<LossReport> {
    check_batch(batch, predictor.image_shape(), predictor.num_conditions())?;
    let draw = TrainingDraw::sample(batch.pixels.shape(), schedule.len(), seed);
    let eps = &draw.noise.epsilon;
    let xt = forward_noise(&batch.pixels.cast::<f64>(), &draw.timesteps, eps, schedule)?;
    let pred = predictor.predict(&xt, &draw.timesteps, &batch.labels)?;
    let item_losses: Vec<f64> = (0..batch.len())
        .map(|i| {
            let (p, e) = (pred.item(i), eps.item(i));
            p.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64
        })
        .collect();
    let loss = if item_losses.is_empty() { 0.0 } else { item_losses.iter().sum::<f64>() / item_losses.len() as f64 };
    Ok(LossReport { loss, timesteps: draw.timesteps, item_losses })
}

/// The same objective as [`training_loss`] for a trainable model, together
/// with its gradient.
pub fn loss_and_grad<T: Scalar>(
    model: &ConditionalDenoiser<T>,
    batch: &ImageBatch,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<(LossReport, ParamStore<T>)> {
    check_batch(batch, model.image_shape(), model.config().num_conditions)?;
    let draw = TrainingDraw::sample(batch.pixels.shape(), schedule.len(), seed);
    let eps: Tensor<T> = draw.noise.epsilon.cast();
    let xt = forward_noise(&batch.pixels.cast::<T>(), &draw.timesteps, &eps, schedule)?;
    let (loss, item_losses, grads) = model.mse_and_grad(&xt, &draw.timesteps, &batch.labels, &eps)?;
    Ok((LossReport { loss, timesteps: draw.timesteps, item_losses }, grads))
}

/// Maps 8-bit storage values to `[-1, 1]`.
pub fn normalize_u8(v: u8) -> f32 {
    2.0 * v as f32 / 255.0 - 1.0
}

/// Inverse of [`normalize_u8`], clamping to the valid range first.
pub fn denormalize_u8(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;
    use std::collections::BTreeSet;

    struct Echo;

    /// Recovers the noise exactly from `x_t`, given the clean images it was
    /// built from.
    struct Oracle<'a> {
        x0: &'a Tensor<f64>,
        schedule: &'a NoiseSchedule,
    }

    impl NoisePredictor for Oracle<'_> {
        fn image_shape(&self) -> [usize; 3] {
            let [_, c, h, w] = self.x0.shape();
            [c, h, w]
        }
        fn num_conditions(&self) -> usize {
            4
        }
        fn predict(&self, x: &Tensor<f64>, t: &[usize], _y: &[usize]) -> Result<Tensor<f64>> {
            let mut out = Tensor::zeros(x.shape());
            for (i, &ti) in t.iter().enumerate() {
                let a = self.schedule.alpha_cum(ti);
                for ((o, &xt), &x0) in out.item_mut(i).iter_mut().zip(x.item(i)).zip(self.x0.item(i)) {
                    *o = (xt - a.sqrt() * x0) / (1.0 - a).sqrt();
                }
            }
            Ok(out)
        }
    }

    impl NoisePredictor for Echo {
        fn image_shape(&self) -> [usize; 3] {
            [1, 2, 2]
        }
        fn num_conditions(&self) -> usize {
            1
        }
        fn predict(&self, x: &Tensor<f64>, _t: &[usize], _y: &[usize]) -> Result<Tensor<f64>> {
            Ok(Tensor::zeros(x.shape()))
        }
    }

    fn batch(n: usize, c: usize, s: usize, labels: usize) -> ImageBatch {
        let len = n * c * s * s;
        let px = (0..len).map(|i| (i as f32 * 0.77).sin() * 0.9).collect();
        ImageBatch::new(Tensor::from_vec([n, c, s, s], px).unwrap(), (0..n).map(|i| i % labels).collect()).unwrap()
    }

    #[test]
    fn marginal_by_hand() {
        let s = NoiseSchedule::new(2, 0.1, 0.2).unwrap();
        let x0 = Tensor::<f64>::zeros([1, 1, 2, 2]);
        let eps = Tensor::from_vec([1, 1, 2, 2], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let xt = forward_noise(&x0, &[2], &eps, &s).unwrap();
        for (a, e) in xt.data().iter().zip(eps.data()) {
            assert!((a - 0.28f64.sqrt() * e).abs() < 1e-12);
            assert!((a / e - 0.52915).abs() < 1e-5);
        }
    }

    #[test]
    fn no_noise_limit() {
        let s = NoiseSchedule::new(10, 1e-9, 1e-9).unwrap();
        let x0 = Tensor::from_vec([1, 1, 1, 3], vec![0.3, -0.7, 1.0]).unwrap();
        let eps = Tensor::from_vec([1, 1, 1, 3], vec![2.0, 1.0, -1.5]).unwrap();
        let xt = forward_noise(&x0, &[1], &eps, &s).unwrap();
        assert!(xt.max_abs_diff(&x0) < 1e-4);
    }

    #[test]
    fn rejects_out_of_range_timestep_and_shape() {
        let s = NoiseSchedule::new(4, 0.1, 0.2).unwrap();
        let x0 = Tensor::<f64>::zeros([1, 1, 2, 2]);
        assert!(forward_noise(&x0, &[0], &x0, &s).is_err());
        assert!(forward_noise(&x0, &[5], &x0, &s).is_err());
        assert!(forward_noise(&x0, &[1], &Tensor::zeros([1, 1, 1, 2]), &s).is_err());
        assert!(forward_noise(&x0, &[1, 2], &x0, &s).is_err());
    }

    #[test]
    fn monte_carlo_marginal_statistics() {
        let s = NoiseSchedule::default();
        let t = s.len();
        let a = s.alpha_cum(t);
        let x0 = [0.9, -0.4, 0.0];
        let draws = 10_000;
        let x0t = Tensor::from_vec([draws, 1, 1, 3], x0.iter().copied().cycle().take(draws * 3).collect()).unwrap();
        let eps = NoiseDraw::sample(x0t.shape(), 11).epsilon;
        let xt = forward_noise(&x0t, &vec![t; draws], &eps, &s).unwrap();
        for (p, &x) in x0.iter().enumerate() {
            let vals: Vec<f64> = (0..draws).map(|i| xt.item(i)[p]).collect();
            let mean = vals.iter().sum::<f64>() / draws as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
            let se = ((1.0 - a) / draws as f64).sqrt();
            assert!((mean - a.sqrt() * x).abs() < 4.0 * se, "pixel {p}: mean {mean}");
            assert!((var / (1.0 - a) - 1.0).abs() < 0.05, "pixel {p}: var {var}");
        }
    }

    #[test]
    fn variance_preserved_for_unit_variance_data() {
        let s = NoiseSchedule::default();
        let n = 20_000;
        let x0 = NoiseDraw::sample([n, 1, 1, 1], 3).epsilon;
        let eps = NoiseDraw::sample([n, 1, 1, 1], 4).epsilon;
        for t in [1, 100, 500, 1000] {
            let xt = forward_noise(&x0, &vec![t; n], &eps, &s).unwrap();
            let mean = xt.data().iter().sum::<f64>() / n as f64;
            let var = xt.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            assert!((var - 1.0).abs() < 0.05, "t={t}: var {var}");
        }
    }

    #[test]
    fn perfect_predictor_has_zero_loss() {
        let s = NoiseSchedule::new(50, 1e-3, 0.05).unwrap();
        let b = batch(4, 2, 3, 4);
        let x0 = b.pixels.cast::<f64>();
        let oracle = Oracle { x0: &x0, schedule: &s };
        let r = training_loss(&oracle, &b, &s, 9).unwrap();
        assert!(r.loss < 1e-20, "{}", r.loss);
    }

    #[test]
    fn zero_predictor_loss_is_noise_energy() {
        let s = NoiseSchedule::default();
        let cfg = DenoiserConfig {
            image_size: 8,
            channels: 3,
            base_width: 8,
            channel_multipliers: vec![1],
            blocks_per_level: 1,
            embed_dim: 8,
            num_conditions: 2,
            attention_levels: BTreeSet::new(),
            max_timestep: 1000,
        };
        let m = ConditionalDenoiser::<f32>::init(cfg, 3).unwrap();
        let b = batch(64, 3, 8, 2);
        let r = training_loss(&m, &b, &s, 5).unwrap();
        let n = (64 * 3 * 8 * 8) as f64;
        // E[eps^2] = 1, Var[eps^2] = 2
        let se = (2.0 / n).sqrt();
        assert!((r.loss - 1.0).abs() < 3.0 * se, "{}", r.loss);
        let draw = TrainingDraw::sample(b.pixels.shape(), s.len(), 5);
        let energy = draw.noise.epsilon.data().iter().map(|e| e * e).sum::<f64>() / n;
        assert!((r.loss - energy).abs() < 1e-12);

        let again = training_loss(&m, &b, &s, 5).unwrap();
        assert_eq!(r.loss.to_bits(), again.loss.to_bits());
        let (lg, _) = loss_and_grad(&m, &b, &s, 5).unwrap();
        assert_eq!(lg.timesteps, r.timesteps);
        assert!((lg.loss - r.loss).abs() < 1e-6);
    }

    #[test]
    fn loss_rejects_bad_labels() {
        let s = NoiseSchedule::new(10, 1e-3, 0.02).unwrap();
        let mut b = batch(2, 1, 2, 1);
        b.labels = vec![0, 3];
        assert!(matches!(training_loss(&Echo, &b, &s, 0), Err(Error::Label { .. })));
    }

    #[test]
    fn storage_normalization_round_trip() {
        for v in 0..=255u8 {
            assert_eq!(denormalize_u8(normalize_u8(v) as f64), v);
        }
        assert_eq!(normalize_u8(0), -1.0);
        assert_eq!(normalize_u8(255), 1.0);
    }
}
