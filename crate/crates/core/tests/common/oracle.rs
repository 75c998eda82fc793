//! Independent reference implementations and stand-in predictors.

use nalgebra::DMatrix;
use phendiff::denoiser::NoisePredictor;
use phendiff::tensor::Tensor;
use phendiff::Result;

pub const SHAPE: [usize; 3] = [2, 3, 3];

pub fn item_len() -> usize {
    SHAPE.iter().product()
}

/// Prediction independent of the input image and timestep.
pub struct Constant(pub Vec<f64>);

impl NoisePredictor for Constant {
    fn image_shape(&self) -> [usize; 3] {
        SHAPE
    }
    fn num_conditions(&self) -> usize {
        4
    }
    fn predict(&self, x: &Tensor<f64>, _t: &[usize], _y: &[usize]) -> Result<Tensor<f64>> {
        let mut out = Tensor::zeros(x.shape());
        for i in 0..x.batch() {
            out.item_mut(i).copy_from_slice(&self.0);
        }
        Ok(out)
    }
}

/// A prediction that depends nonlinearly on the image, timestep and label.
pub struct Wobbly;

impl NoisePredictor for Wobbly {
    fn image_shape(&self) -> [usize; 3] {
        SHAPE
    }
    fn num_conditions(&self) -> usize {
        4
    }
    fn predict(&self, x: &Tensor<f64>, t: &[usize], y: &[usize]) -> Result<Tensor<f64>> {
        let mut out = x.clone();
        for i in 0..x.batch() {
            for (j, v) in out.item_mut(i).iter_mut().enumerate() {
                *v = (1.3 * *v + 0.01 * t[i] as f64 + y[i] as f64 + j as f64).sin();
            }
        }
        Ok(out)
    }
}

/// DDIM update written through the predicted clean image.
pub fn textbook_step(x: &Tensor<f64>, eps: &Tensor<f64>, a_hi: f64, a_lo: f64) -> Tensor<f64> {
    let mut out = x.clone();
    for (o, &e) in out.data_mut().iter_mut().zip(eps.data()) {
        let x0 = (*o - (1.0 - a_hi).sqrt() * e) / a_hi.sqrt();
        *o = a_lo.sqrt() * x0 + (1.0 - a_lo).sqrt() * e;
    }
    out
}

/// Principal square root by the Denman-Beavers iteration. Needs a matrix
/// with no eigenvalues on the closed negative real axis.
pub fn sqrtm(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let (mut y, mut z) = (a.clone(), DMatrix::identity(n, n));
    for _ in 0..100 {
        let yi = y.clone().try_inverse().expect("invertible");
        let zi = z.clone().try_inverse().expect("invertible");
        let next = (&y + zi) * 0.5;
        z = (&z + yi) * 0.5;
        let done = (&next - &y).amax() <= 1e-15 * next.amax();
        y = next;
        if done {
            break;
        }
    }
    y
}

/// Fréchet distance through the square root of the plain product `S1 S2`.
pub fn frechet(m1: &[f64], s1: &DMatrix<f64>, m2: &[f64], s2: &DMatrix<f64>) -> f64 {
    let dm: f64 = m1.iter().zip(m2).map(|(a, b)| (a - b).powi(2)).sum();
    dm + s1.trace() + s2.trace() - 2.0 * sqrtm(&(s1 * s2)).trace()
}

/// `B B^T + floor I` for a random `B`.
pub fn random_spd(d: usize, rng: &mut impl rand::Rng, floor: f64) -> DMatrix<f64> {
    let b = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
    &b * b.transpose() + DMatrix::identity(d, d) * floor
}
