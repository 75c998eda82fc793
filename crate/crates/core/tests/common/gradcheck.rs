//! Reverse-mode gradients of the denoiser against central finite
//! differences, in double precision, on miniature architectures.

use std::collections::BTreeSet;

use phendiff::denoiser::{ConditionalDenoiser, DenoiserConfig};
use phendiff::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn tiny(attention: bool, levels: usize) -> DenoiserConfig {
    DenoiserConfig {
        image_size: 8,
        channels: 2,
        base_width: 4,
        channel_multipliers: vec![1; levels],
        blocks_per_level: 1,
        embed_dim: 8,
        num_conditions: 3,
        attention_levels: if attention { BTreeSet::from([0]) } else { BTreeSet::new() },
        max_timestep: 10,
    }
}

fn normal(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Every parameter gets random values, so no gradient is trivially zero
/// (the output layer starts at zero otherwise).
fn randomized(config: DenoiserConfig, seed: u64) -> ConditionalDenoiser<f64> {
    let mut model = ConditionalDenoiser::<f64>::init(config, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for p in model.params_mut().iter_mut() {
        for v in p.data.iter_mut() {
            *v += 0.3 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    model
}

pub struct GroupError {
    pub name: String,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// L2 distance over L2 norm of the numeric gradient.
    pub relative: f64,
}

/// Compares up to eight entries of every parameter group.
pub fn gradient_errors(config: DenoiserConfig, seed: u64) -> Vec<GroupError> {
    let mut model = randomized(config.clone(), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [2, config.channels, config.image_size, config.image_size];
    let n: usize = shape.iter().product();
    let x = Tensor::from_vec(shape, normal(&mut rng, n, 1.0)).unwrap();
    let target = Tensor::from_vec(shape, normal(&mut rng, n, 1.0)).unwrap();
    let (t, y) = ([3, 9], [0, 2]);
    let loss = |m: &ConditionalDenoiser<f64>| m.mse_and_grad(&x, &t, &y, &target).unwrap().0;
    let (_, _, grads) = model.mse_and_grad(&x, &t, &y, &target).unwrap();

    let h = 1e-5;
    let names: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();
    let mut out = Vec::new();
    for (k, name) in names.into_iter().enumerate() {
        let len = model.params().iter().nth(k).unwrap().data.len();
        let picks: Vec<usize> = if len <= 8 { (0..len).collect() } else { (0..8).map(|_| rng.gen_range(0..len)).collect() };
        let analytic: Vec<f64> = picks.iter().map(|&i| grads.iter().nth(k).unwrap().data[i]).collect();
        let mut numeric = Vec::with_capacity(picks.len());
        for &i in &picks {
            let orig = model.params().iter().nth(k).unwrap().data[i];
            model.params_mut().iter_mut().nth(k).unwrap().data[i] = orig + h;
            let up = loss(&model);
            model.params_mut().iter_mut().nth(k).unwrap().data[i] = orig - h;
            let down = loss(&model);
            model.params_mut().iter_mut().nth(k).unwrap().data[i] = orig;
            numeric.push((up - down) / (2.0 * h));
        }
        let diff = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = numeric.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-6);
        out.push(GroupError { name, analytic, numeric, relative: diff / scale });
    }
    out
}
