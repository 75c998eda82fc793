//! Image-set metrics: Fréchet distance between embedded sets, reconstruction
//! error, handcrafted morphology features, and per-treatment correlation of
//! condition means.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::TreatmentGroup;
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

/// Added to the diagonal of every fitted covariance.
pub const COVARIANCE_RIDGE: f64 = 1e-6;
const SYMMETRY_TOL: f64 = 1e-9;
const EIGEN_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianMoments {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.shape() != (d, d) {
            return Err(Error::Metric(format!("covariance is {:?} for a {d}-dim mean", cov.shape())));
        }
        let scale = cov.amax().max(1.0);
        if (&cov - cov.transpose()).amax() > SYMMETRY_TOL * scale {
            return Err(Error::Metric("covariance is not symmetric".into()));
        }
        Ok(GaussianMoments { mean, cov })
    }

    /// Sample mean and unbiased covariance of the rows, plus the ridge.
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if n < d + 1 || d == 0 {
            return Err(Error::Metric(format!("{n} samples cannot fit a {d}-dim covariance; need at least {}", d + 1)));
        }
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Metric("samples differ in dimension".into()));
        }
        let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
        let mean = x.row_mean().transpose();
        let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
        let mut cov = centered.transpose() * &centered / (n - 1) as f64;
        cov = (&cov + cov.transpose()) * 0.5;
        for i in 0..d {
            cov[(i, i)] += COVARIANCE_RIDGE;
        }
        GaussianMoments::new(mean, cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Eigen-decomposition of a symmetric PSD matrix with tiny negative
/// eigenvalues clipped to zero.
fn psd_eigen(m: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let mut e = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let scale = e.eigenvalues.amax().max(1.0);
    for v in e.eigenvalues.iter_mut() {
        if *v < -EIGEN_TOL * scale {
            return Err(Error::Metric(format!("matrix is not positive semi-definite (eigenvalue {v})")));
        }
        *v = v.max(0.0);
    }
    Ok(e)
}

fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let e = psd_eigen(m)?;
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(f64::sqrt));
    Ok(&e.eigenvectors * d * e.eigenvectors.transpose())
}

/// `|m1 - m2|^2 + tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2)`.
pub fn frechet_distance(a: &GaussianMoments, b: &GaussianMoments) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Metric(format!("dimensions differ: {} vs {}", a.dim(), b.dim())));
    }
    let r = psd_sqrt(&a.cov)?;
    let inner = &r * &b.cov * &r;
    let cross: f64 = psd_eigen(&inner)?.eigenvalues.iter().map(|v| v.sqrt()).sum();
    let dm = (&a.mean - &b.mean).norm_squared();
    let d = dm + a.cov.trace() + b.cov.trace() - 2.0 * cross;
    let scale = (a.cov.trace() + b.cov.trace() + dm).max(1.0);
    if d < 0.0 {
        if d < -EIGEN_TOL * scale {
            return Err(Error::Metric(format!("negative distance {d}")));
        }
        return Ok(0.0);
    }
    Ok(d)
}

/// Maps an image to a fixed-length vector for distance computations.
pub trait Embedder {
    fn dim(&self) -> usize;
    fn embed(&self, chw: &[f64]) -> Result<Vec<f64>>;
}

/// Fixed random projection of an average-pooled image.
///
/// Each channel is pooled to `pooled x pooled`, shifted and scaled by
/// per-channel constants, and projected by a seeded Gaussian matrix with
/// entries of variance `1 / inputs`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionEmbedder {
    shape: [usize; 3],
    pooled: usize,
    channel_mean: Vec<f64>,
    channel_std: Vec<f64>,
    weights: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedderInfo {
    pub dim: usize,
    pub pooled: usize,
    pub seed: u64,
    pub channel_mean: Vec<f64>,
    pub channel_std: Vec<f64>,
}

impl ProjectionEmbedder {
    pub const DEFAULT_DIM: usize = 64;
    pub const DEFAULT_POOLED: usize = 8;

    pub fn new(shape: [usize; 3], info: &EmbedderInfo) -> Result<Self> {
        let [c, h, w] = shape;
        let p = info.pooled;
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::Config(format!("image {h}x{w} cannot be pooled to {p}x{p}")));
        }
        if info.channel_mean.len() != c || info.channel_std.len() != c || info.channel_std.iter().any(|&s| s <= 0.0) {
            return Err(Error::Config("need one mean and one positive std per channel".into()));
        }
        let inputs = c * p * p;
        let law = Normal::new(0.0, (1.0 / inputs as f64).sqrt()).expect("positive std");
        let mut rng = seed::rng(info.seed, &[]);
        let weights = DMatrix::from_fn(info.dim, inputs, |_, _| law.sample(&mut rng));
        Ok(ProjectionEmbedder {
            shape,
            pooled: p,
            channel_mean: info.channel_mean.clone(),
            channel_std: info.channel_std.clone(),
            weights,
        })
    }

    /// Channel statistics taken from `reference`, so every embedding shares
    /// the same standardization.
    pub fn fit_standardization(reference: &Tensor<f64>, dim: usize, seed: u64) -> Result<Self> {
        let [n, c, h, w] = reference.shape();
        if n == 0 {
            return Err(Error::Metric("empty reference set".into()));
        }
        let mut mean = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for i in 0..n {
            for (ch, plane) in reference.item(i).chunks(h * w).enumerate() {
                mean[ch] += plane.iter().sum::<f64>();
                sq[ch] += plane.iter().map(|v| v * v).sum::<f64>();
            }
        }
        let count = (n * h * w) as f64;
        let std: Vec<f64> = (0..c)
            .map(|ch| {
                let m = mean[ch] / count;
                (sq[ch] / count - m * m).max(0.0).sqrt().max(1e-6)
            })
            .collect();
        let mean = mean.iter().map(|m| m / count).collect();
        let info = EmbedderInfo { dim, pooled: Self::DEFAULT_POOLED, seed, channel_mean: mean, channel_std: std };
        ProjectionEmbedder::new([c, h, w], &info)
    }

    pub fn info(&self, seed: u64) -> EmbedderInfo {
        EmbedderInfo {
            dim: self.weights.nrows(),
            pooled: self.pooled,
            seed,
            channel_mean: self.channel_mean.clone(),
            channel_std: self.channel_std.clone(),
        }
    }
}

impl Embedder for ProjectionEmbedder {
    fn dim(&self) -> usize {
        self.weights.nrows()
    }

    fn embed(&self, chw: &[f64]) -> Result<Vec<f64>> {
        let [c, h, w] = self.shape;
        if chw.len() != c * h * w {
            return Err(Error::Shape { expected: self.shape.to_vec(), got: vec![chw.len()] });
        }
        let p = self.pooled;
        let (bh, bw) = (h / p, w / p);
        let mut pooled = DVector::zeros(c * p * p);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    pooled[(ch * p + y / bh) * p + x / bw] += chw[(ch * h + y) * w + x];
                }
            }
            for k in 0..p * p {
                let v = &mut pooled[ch * p * p + k];
                *v = (*v / (bh * bw) as f64 - self.channel_mean[ch]) / self.channel_std[ch];
            }
        }
        Ok((&self.weights * pooled).iter().copied().collect())
    }
}

pub fn embed_all<E: Embedder + ?Sized>(embedder: &E, images: &Tensor<f64>) -> Result<Vec<Vec<f64>>> {
    (0..images.batch()).map(|i| embedder.embed(images.item(i))).collect()
}

/// Fréchet distance between the embedded image sets.
pub fn fid<E: Embedder + ?Sized>(real: &Tensor<f64>, generated: &Tensor<f64>, embedder: &E) -> Result<f64> {
    for set in [real, generated] {
        if set.batch() < embedder.dim() + 1 {
            return Err(Error::Metric(format!(
                "{} images is too few for a {}-dim embedding",
                set.batch(),
                embedder.dim()
            )));
        }
    }
    let a = GaussianMoments::fit(&embed_all(embedder, real)?)?;
    let b = GaussianMoments::fit(&embed_all(embedder, generated)?)?;
    frechet_distance(&a, &b)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionLoss {
    /// Sum of squared per-pixel differences.
    pub sum: f64,
    /// Mean of squared per-pixel differences.
    pub mean: f64,
}

pub fn reconstruction_loss(x: &[f64], x_rec: &[f64]) -> Result<ReconstructionLoss> {
    if x.len() != x_rec.len() {
        return Err(Error::Shape { expected: vec![x.len()], got: vec![x_rec.len()] });
    }
    let sum: f64 = x.iter().zip(x_rec).map(|(a, b)| (a - b) * (a - b)).sum();
    let mean = if x.is_empty() { 0.0 } else { sum / x.len() as f64 };
    Ok(ReconstructionLoss { sum, mean })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionStats {
    pub mean_sum: f64,
    pub mean_per_pixel: f64,
    pub per_image: Vec<ReconstructionLoss>,
}

pub fn reconstruction_stats(x: &Tensor<f64>, x_rec: &Tensor<f64>) -> Result<ReconstructionStats> {
    x_rec.ensure_shape(x.shape())?;
    let per_image = (0..x.batch()).map(|i| reconstruction_loss(x.item(i), x_rec.item(i))).collect::<Result<Vec<_>>>()?;
    let n = per_image.len().max(1) as f64;
    Ok(ReconstructionStats {
        mean_sum: per_image.iter().map(|l| l.sum).sum::<f64>() / n,
        mean_per_pixel: per_image.iter().map(|l| l.mean).sum::<f64>() / n,
        per_image,
    })
}

pub const FEATURE_NAMES: [&str; 15] = [
    "mean_intensity_c0",
    "mean_intensity_c1",
    "mean_intensity_c2",
    "std_intensity_c0",
    "std_intensity_c1",
    "std_intensity_c2",
    "nuclear_area_fraction",
    "component_count",
    "mean_component_area",
    "std_component_area",
    "max_component_area",
    "mean_elongation",
    "nuclear_intensity",
    "nuclear_intensity_c1",
    "nuclear_intensity_c2",
];

/// Pixels above this value on the nuclear channel are foreground.
pub const FOREGROUND_THRESHOLD: f64 = 0.0;
/// Connected components smaller than this many pixels are ignored.
pub const MIN_COMPONENT_AREA: usize = 4;

/// Handcrafted features of one three-channel image, in the order of
/// [`FEATURE_NAMES`]. Channel 0 is the nuclear channel.
///
/// Component statistics are 0 for an image without components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn get(&self, name: &str) -> Option<f64> {
        FEATURE_NAMES.iter().position(|&n| n == name).map(|i| self.0[i])
    }
}

pub fn feature_index(name: &str) -> Result<usize> {
    FEATURE_NAMES.iter().position(|&n| n == name).ok_or_else(|| Error::Config(format!("unknown feature `{name}`")))
}

/// 4-connected components of `mask`, each as a list of `(y, x)` pixels.
pub fn connected_components(mask: &[bool], h: usize, w: usize) -> Vec<Vec<(usize, usize)>> {
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for start in 0..h * w {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let mut comp = Vec::new();
        while let Some(p) = stack.pop() {
            let (y, x) = (p / w, p % w);
            comp.push((y, x));
            let mut visit = |q: usize| {
                if mask[q] && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// Ratio of the principal axes of the component's second-moment ellipse,
/// treating each pixel as a unit square.
pub fn elongation(pixels: &[(usize, usize)]) -> f64 {
    let n = pixels.len() as f64;
    let my = pixels.iter().map(|p| p.0 as f64).sum::<f64>() / n;
    let mx = pixels.iter().map(|p| p.1 as f64).sum::<f64>() / n;
    let (mut syy, mut sxx, mut sxy) = (1.0 / 12.0, 1.0 / 12.0, 0.0);
    for &(y, x) in pixels {
        let (dy, dx) = (y as f64 - my, x as f64 - mx);
        syy += dy * dy / n;
        sxx += dx * dx / n;
        sxy += dx * dy / n;
    }
    let half_tr = 0.5 * (sxx + syy);
    let disc = (0.25 * (sxx - syy).powi(2) + sxy * sxy).sqrt();
    ((half_tr + disc) / (half_tr - disc)).sqrt()
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt())
}

pub fn extract_features(chw: &[f64], shape: [usize; 3]) -> Result<FeatureVector> {
    let [c, h, w] = shape;
    if c != 3 {
        return Err(Error::Shape { expected: vec![3, h, w], got: vec![c, h, w] });
    }
    if chw.len() != c * h * w {
        return Err(Error::Shape { expected: shape.to_vec(), got: vec![chw.len()] });
    }
    let plane = |ch: usize| &chw[ch * h * w..(ch + 1) * h * w];
    let mut f = Vec::with_capacity(FEATURE_NAMES.len());
    let stats: Vec<(f64, f64)> = (0..3).map(|ch| mean_std(plane(ch))).collect();
    f.extend(stats.iter().map(|s| s.0));
    f.extend(stats.iter().map(|s| s.1));

    let mask: Vec<bool> = plane(0).iter().map(|&v| v > FOREGROUND_THRESHOLD).collect();
    f.push(mask.iter().filter(|&&m| m).count() as f64 / (h * w) as f64);
    let comps: Vec<_> = connected_components(&mask, h, w)
        .into_iter()
        .filter(|c| c.len() >= MIN_COMPONENT_AREA)
        .collect();
    let areas: Vec<f64> = comps.iter().map(|c| c.len() as f64).collect();
    let (area_mean, area_std) = mean_std(&areas);
    f.push(comps.len() as f64);
    f.push(area_mean);
    f.push(area_std);
    f.push(areas.iter().copied().fold(0.0, f64::max));
    f.push(mean_std(&comps.iter().map(|c| elongation(c)).collect::<Vec<_>>()).0);
    for ch in 0..3 {
        let vals: Vec<f64> = comps.iter().flatten().map(|&(y, x)| plane(ch)[y * w + x]).collect();
        f.push(mean_std(&vals).0);
    }
    Ok(FeatureVector(f))
}

pub fn features_of(images: &Tensor<f64>) -> Result<Vec<FeatureVector>> {
    let [_, c, h, w] = images.shape();
    (0..images.batch()).map(|i| extract_features(images.item(i), [c, h, w])).collect()
}

/// Pearson correlation, or `None` when either side has zero variance or
/// fewer than two points.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (mx, _) = mean_std(x);
    let (my, _) = mean_std(y);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    let scale = x.iter().chain(y).map(|v| v.abs()).fold(0.0, f64::max).max(1e-300);
    if sxx.sqrt() <= 1e-12 * scale || syy.sqrt() <= 1e-12 * scale {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureCorrelation {
    pub feature: String,
    pub real_means: Vec<f64>,
    pub generated_means: Vec<f64>,
    /// `None` when either side has zero variance across concentrations.
    pub r: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreatmentCorrelations {
    pub treatment: String,
    pub conditions: Vec<usize>,
    pub features: Vec<FeatureCorrelation>,
}

impl TreatmentCorrelations {
    pub fn r(&self, feature: &str) -> Option<f64> {
        self.features.iter().find(|f| f.feature == feature).and_then(|f| f.r)
    }
}

/// For every treatment and feature, the correlation between per-condition
/// means of real and generated features across the treatment's
/// concentrations.
pub fn condition_mean_correlation(
    real: &BTreeMap<usize, Vec<FeatureVector>>,
    generated: &BTreeMap<usize, Vec<FeatureVector>>,
    treatments: &[TreatmentGroup],
) -> Result<Vec<TreatmentCorrelations>> {
    let means = |sets: &BTreeMap<usize, Vec<FeatureVector>>, label: usize, side: &str| -> Result<Vec<f64>> {
        let set = sets
            .get(&label)
            .filter(|s| s.len() >= 2)
            .ok_or_else(|| Error::Metric(format!("{side} condition {label} needs at least 2 images")))?;
        Ok((0..FEATURE_NAMES.len()).map(|k| set.iter().map(|f| f.0[k]).sum::<f64>() / set.len() as f64).collect())
    };
    let mut out = Vec::with_capacity(treatments.len());
    for t in treatments {
        if t.labels.len() < 3 {
            return Err(Error::Metric(format!("treatment `{}` has fewer than 3 concentrations", t.treatment)));
        }
        let r_means = t.labels.iter().map(|&l| means(real, l, "real")).collect::<Result<Vec<_>>>()?;
        let g_means = t.labels.iter().map(|&l| means(generated, l, "generated")).collect::<Result<Vec<_>>>()?;
        let features = FEATURE_NAMES
            .iter()
            .enumerate()
            .map(|(k, name)| {
                let rm: Vec<f64> = r_means.iter().map(|m| m[k]).collect();
                let gm: Vec<f64> = g_means.iter().map(|m| m[k]).collect();
                FeatureCorrelation { feature: (*name).into(), r: pearson(&rm, &gm), real_means: rm, generated_means: gm }
            })
            .collect();
        out.push(TreatmentCorrelations { treatment: t.treatment.clone(), conditions: t.labels.clone(), features });
    }
    Ok(out)
}

/// `feature,treatment,r` rows; undefined correlations are written as `NA`.
pub fn correlation_histogram_csv(correlations: &[TreatmentCorrelations]) -> String {
    let mut out = String::from("feature,treatment,r\n");
    for t in correlations {
        for f in &t.features {
            let r = f.r.map_or_else(|| "NA".to_string(), |r| format!("{r}"));
            out.push_str(&format!("{},{},{}\n", f.feature, t.treatment, r));
        }
    }
    out
}

/// Counts of defined correlations in `bins` equal-width bins over [-1, 1].
pub fn correlation_histogram(correlations: &[TreatmentCorrelations], bins: usize) -> Vec<usize> {
    let mut counts = vec![0; bins.max(1)];
    for r in correlations.iter().flat_map(|t| t.features.iter().filter_map(|f| f.r)) {
        let b = (((r + 1.0) / 2.0) * counts.len() as f64).floor() as usize;
        let last = counts.len() - 1;
        counts[b.min(last)] += 1;
    }
    counts
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    /// Two-sided p-value.
    pub p: f64,
}

/// Welch's unequal-variance two-sample t-test.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Metric("t-test needs at least 2 samples per group".into()));
    }
    let var = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        (m, v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64)
    };
    let ((ma, va), (mb, vb)) = (var(a), var(b));
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    if sa + sb == 0.0 {
        return Err(Error::Metric("t-test on two constant groups".into()));
    }
    let t = (ma - mb) / (sa + sb).sqrt();
    let df = (sa + sb).powi(2) / (sa * sa / (a.len() - 1) as f64 + sb * sb / (b.len() - 1) as f64);
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Metric(e.to_string()))?;
    Ok(TTest { t, df, p: 2.0 * dist.sf(t.abs()) })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn moments(mean: &[f64], cov: &[f64]) -> GaussianMoments {
        let d = mean.len();
        GaussianMoments::new(DVector::from_column_slice(mean), DMatrix::from_row_slice(d, d, cov)).unwrap()
    }

    #[test]
    fn scalar_frechet_by_hand() {
        let a = moments(&[0.0], &[1.0]);
        let b = moments(&[1.0], &[4.0]);
        assert!((frechet_distance(&a, &b).unwrap() - 2.0).abs() < 1e-12);
        assert!(frechet_distance(&a, &a).unwrap() < 1e-12);
    }

    #[test]
    fn frechet_rejects_bad_inputs() {
        assert!(GaussianMoments::new(DVector::zeros(2), DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0])).is_err());
        let a = moments(&[0.0], &[1.0]);
        let b = moments(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0]);
        assert!(frechet_distance(&a, &b).is_err());
        let neg = moments(&[0.0], &[-1.0]);
        assert!(frechet_distance(&neg, &a).is_err());
        assert!(GaussianMoments::fit(&[vec![1.0, 2.0], vec![0.0, 1.0]]).is_err());
    }

    #[test]
    fn reconstruction_by_hand() {
        let l = reconstruction_loss(&[0.0; 4], &[1.0; 4]).unwrap();
        assert_eq!((l.sum, l.mean), (4.0, 1.0));
        assert_eq!(reconstruction_loss(&[0.3; 4], &[0.3; 4]).unwrap().sum, 0.0);
        assert!(reconstruction_loss(&[0.0; 4], &[0.0; 3]).is_err());
    }

    fn square_image(size: usize, top: usize, left: usize, side: usize) -> Vec<f64> {
        let mut img = vec![-1.0; 3 * size * size];
        for y in top..top + side {
            for x in left..left + side {
                img[y * size + x] = 1.0;
            }
        }
        img
    }

    #[test]
    fn background_and_square_features() {
        let f = extract_features(&vec![-1.0; 3 * 16 * 16], [3, 16, 16]).unwrap();
        assert_eq!(f.get("nuclear_area_fraction"), Some(0.0));
        assert_eq!(f.get("component_count"), Some(0.0));
        assert!(f.0.iter().all(|v| v.is_finite()));

        let f = extract_features(&square_image(16, 3, 4, 5), [3, 16, 16]).unwrap();
        assert_eq!(f.get("component_count"), Some(1.0));
        assert_eq!(f.get("mean_component_area"), Some(25.0));
        assert!((f.get("mean_elongation").unwrap() - 1.0).abs() < 1e-6);
        assert_eq!(f.get("nuclear_intensity"), Some(1.0));
        assert_eq!(f.get("nuclear_intensity_c1"), Some(-1.0));
        assert!(extract_features(&vec![0.0; 16 * 16], [1, 16, 16]).is_err());
    }

    #[test]
    fn elongation_of_bars_and_diagonals() {
        let bar: Vec<(usize, usize)> = (0..4).flat_map(|y| (0..8).map(move |x| (y, x))).collect();
        let diag: Vec<(usize, usize)> = (0..6).map(|i| (i, i)).collect();
        // axis-aligned 8x4 bar: sqrt((64/12) / (16/12)) = 2
        assert!((elongation(&bar) - 2.0).abs() < 1e-12);
        assert!(elongation(&diag) > 3.0);
    }

    #[test]
    fn small_components_are_dropped_and_touching_diagonals_split() {
        let mut mask = vec![false; 36];
        for p in [0, 1, 6, 7] {
            mask[p] = true;
        }
        mask[14] = true; // diagonal neighbour of 7, separate under 4-connectivity
        mask[35] = true;
        let comps = connected_components(&mask, 6, 6);
        assert_eq!(comps.len(), 3);
        assert_eq!(comps[0].len(), 4);
    }

    #[test]
    fn pearson_by_hand() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        // deviations (-4, -1, 5)/3 and (-5, 1, 4)/3: r = 39 / 42
        assert!((pearson(&[1.0, 2.0, 4.0], &[1.0, 3.0, 4.0]).unwrap() - 13.0 / 14.0).abs() < 1e-12);
        assert_eq!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), None);
        assert_eq!(pearson(&[1.0], &[1.0]), None);
    }

    /// Two-sided tail mass of the t density, by direct quadrature of the
    /// unnormalized kernel.
    fn t_tail_oracle(t: f64, df: f64) -> f64 {
        let f = |x: f64| (1.0 + x * x / df).powf(-(df + 1.0) / 2.0);
        let (hi, n) = (400.0, 4_000_000);
        let h = hi / n as f64;
        let (mut total, mut tail) = (0.0, 0.0);
        for i in 0..n {
            let x = (i as f64 + 0.5) * h;
            let v = f(x) * h;
            total += v;
            if x > t.abs() {
                tail += v;
            }
        }
        tail / total
    }

    #[test]
    fn welch_matches_oracle() {
        let a = [19.1, 20.4, 21.2, 18.7, 20.0, 21.5];
        let b = [22.3, 23.1, 21.9, 24.0, 22.8];
        let t = welch_t_test(&a, &b).unwrap();
        let ma = a.iter().sum::<f64>() / 6.0;
        let mb = b.iter().sum::<f64>() / 5.0;
        let va = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / 5.0;
        let vb = b.iter().map(|x| (x - mb).powi(2)).sum::<f64>() / 4.0;
        assert!((t.t - (ma - mb) / (va / 6.0 + vb / 5.0).sqrt()).abs() < 1e-12);
        assert!((t.p - t_tail_oracle(t.t, t.df)).abs() < 1e-4);
        let same = welch_t_test(&a, &a).unwrap();
        assert!((same.p - 1.0).abs() < 1e-12);
        assert!(welch_t_test(&[1.0], &a).is_err());
    }
}
