mod common;

use std::collections::BTreeMap;

use common::oracle;
use nalgebra::{DMatrix, DVector};
use phendiff::data::{generate_benchmark, load_dataset, Split, MANIFEST_FILE};
use phendiff::eval::{
    condition_mean_correlation, fid, frechet_distance, pearson, reconstruction_loss, FeatureVector,
    GaussianMoments, ProjectionEmbedder,
};
use phendiff::pipeline::{compare_sets, real_sets, EvalConfig};
use phendiff::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn frechet_matches_denman_beavers_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..200 {
        let d = 1 + case % 8;
        let s1 = oracle::random_spd(d, &mut rng, 0.05);
        let s2 = oracle::random_spd(d, &mut rng, 0.05);
        let m1: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let m2: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let a = GaussianMoments::new(DVector::from_vec(m1.clone()), s1.clone()).unwrap();
        let b = GaussianMoments::new(DVector::from_vec(m2.clone()), s2.clone()).unwrap();
        let got = frechet_distance(&a, &b).unwrap();
        let want = oracle::frechet(&m1, &s1, &m2, &s2);
        assert!((got - want).abs() < 1e-6 * want.max(1.0), "d={d}: {got} vs {want}");
        assert!((got - frechet_distance(&b, &a).unwrap()).abs() < 1e-9 * want.max(1.0));
    }
}

#[test]
fn frechet_of_identical_gaussians_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for d in 1..=8 {
        let s = oracle::random_spd(d, &mut rng, 0.0);
        let g = GaussianMoments::new(DVector::from_fn(d, |i, _| i as f64), s).unwrap();
        assert!(frechet_distance(&g, &g).unwrap().abs() < 1e-6);
    }
    let singular = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
    let g = GaussianMoments::new(DVector::zeros(2), singular).unwrap();
    assert!(frechet_distance(&g, &g).unwrap() < 1e-6);
}

fn random_images(n: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec([n, 3, 16, 16], (0..n * 768).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn fid_is_zero_on_itself_symmetric_and_order_free() {
    let x = random_images(60, 1);
    let y = random_images(60, 2).map(|v| 0.5 * v + 0.2);
    let emb = ProjectionEmbedder::fit_standardization(&x, 16, 3).unwrap();
    assert!(fid(&x, &x, &emb).unwrap() <= 1e-6);
    let xy = fid(&x, &y, &emb).unwrap();
    assert!(xy > 1.0);
    assert!((xy - fid(&y, &x, &emb).unwrap()).abs() <= 1e-9 * xy);
    let reversed: Vec<usize> = (0..60).rev().collect();
    assert!((xy - fid(&x.select(&reversed), &y, &emb).unwrap()).abs() <= 1e-9 * xy);
    assert!(fid(&x.select(&[0, 1, 2]), &y, &emb).is_err());
}

#[test]
fn reconstruction_of_itself_is_zero() {
    let x = random_images(1, 4);
    let r = reconstruction_loss(x.data(), x.data()).unwrap();
    assert_eq!((r.sum, r.mean), (0.0, 0.0));
}

#[test]
fn pearson_stays_in_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..1000 {
        let n = rng.gen_range(2..8);
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| v * rng.gen_range(-1.0..1.0) + rng.gen_range(-1.0..1.0)).collect();
        if let Some(r) = pearson(&x, &y) {
            assert!((-1.0..=1.0).contains(&r));
        }
    }
    assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-12);
    assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
    assert!((pearson(&[1.0, 2.0, 4.0], &[1.0, 3.0, 4.0]).unwrap() - 13.0 / 14.0).abs() < 1e-12);
    assert_eq!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), None);
}

#[test]
fn condition_mean_correlation_requires_three_ranks_and_two_images() {
    let f = |v: f64| FeatureVector(vec![v; phendiff::eval::FEATURE_NAMES.len()]);
    let sets: BTreeMap<usize, Vec<FeatureVector>> =
        (1..=3).map(|c| (c, vec![f(c as f64), f(c as f64 + 0.5)])).collect();
    let group = phendiff::data::TreatmentGroup { treatment: "t".into(), labels: vec![1, 2, 3] };
    let r = condition_mean_correlation(&sets, &sets, std::slice::from_ref(&group)).unwrap();
    assert!(r[0].features.iter().all(|c| (c.r.unwrap() - 1.0).abs() < 1e-12));
    let short = phendiff::data::TreatmentGroup { treatment: "t".into(), labels: vec![1, 2] };
    assert!(condition_mean_correlation(&sets, &sets, &[short]).is_err());
    let mut thin = sets.clone();
    thin.get_mut(&2).unwrap().pop();
    assert!(condition_mean_correlation(&sets, &thin, &[group]).is_err());
}

#[test]
fn comparing_real_sets_with_themselves() {
    let dir = tempfile::tempdir().unwrap();
    generate_benchmark(&common::small_synth(40, 40), dir.path()).unwrap();
    let data = load_dataset(&dir.path().join(MANIFEST_FILE), Split::Heldout).unwrap();
    let real = real_sets(&data);
    let cfg = EvalConfig { embed_dim: 16, ..EvalConfig::default() };
    let report = compare_sets(&data.manifest, &real, &real, &cfg).unwrap();
    for name in data.manifest.condition_names() {
        assert!(report.fid_matched(&name).unwrap() <= 1e-6);
    }
    let defined: Vec<f64> = report.correlations.iter().flat_map(|t| t.features.iter().filter_map(|f| f.r)).collect();
    assert!(!defined.is_empty());
    assert!(defined.iter().all(|r| (r - 1.0).abs() < 1e-9));
    assert_eq!(report, compare_sets(&data.manifest, &real, &real, &cfg).unwrap());
    for t in &report.t_tests {
        assert_eq!(t.real, t.generated);
    }
}
