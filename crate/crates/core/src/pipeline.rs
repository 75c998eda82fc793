//! End-to-end evaluation: translate held-out control images to every
//! condition, reconstruct them, and compare the generated sets with real
//! ones.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DatasetManifest};
use crate::denoiser::NoisePredictor;
use crate::error::{Error, Result};
use crate::eval::{
    condition_mean_correlation, features_of, fid, reconstruction_stats, welch_t_test, EmbedderInfo, FeatureVector,
    ProjectionEmbedder, ReconstructionLoss, TTest, TreatmentCorrelations, FEATURE_NAMES,
};
use crate::sampler::{ddim_invert, ddim_sample, translate};
use crate::schedule::{NoiseSchedule, StepSubsequence};
use crate::seed;
use crate::tensor::Tensor;

const STREAM_SOURCES: u64 = 20;
const STREAM_EMBED: u64 = 21;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Sampling steps for translation.
    pub steps: usize,
    /// Step counts at which the round-trip reconstruction is measured.
    pub reconstruction_steps: Vec<usize>,
    /// Held-out control images to translate.
    pub sources: usize,
    pub seed: u64,
    pub embed_dim: usize,
    /// Feature compared between each treated condition and the control by
    /// a t-test.
    pub t_test_feature: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            steps: 100,
            reconstruction_steps: vec![10, 50, 100],
            sources: 100,
            seed: 0,
            embed_dim: ProjectionEmbedder::DEFAULT_DIM,
            t_test_feature: "mean_component_area".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionSummary {
    pub steps: usize,
    /// Mean over images of the per-image sum of squared differences.
    pub mean_sum: f64,
    /// Mean over images of the per-pixel mean squared difference.
    pub mean_per_pixel: f64,
    pub per_image: Vec<ReconstructionLoss>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionTTest {
    pub condition: String,
    pub feature: String,
    /// Real control vs real condition.
    pub real: Option<TTest>,
    /// Generated control vs generated condition.
    pub generated: Option<TTest>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMeans {
    pub condition: String,
    pub real: Vec<f64>,
    pub generated: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: Option<String>,
    pub checkpoint_step: Option<u64>,
    pub seed: u64,
    pub steps: Option<usize>,
    pub source_condition: Option<String>,
    /// Indices of the translated sources within the held-out control set.
    pub source_indices: Vec<usize>,
    pub embedder: EmbedderInfo,
    pub feature_names: Vec<String>,
    /// `fid[real][generated]` between real and generated condition sets.
    pub fid: BTreeMap<String, BTreeMap<String, f64>>,
    pub reconstruction: Vec<ReconstructionSummary>,
    pub feature_means: Vec<FeatureMeans>,
    pub correlations: Vec<TreatmentCorrelations>,
    pub t_tests: Vec<ConditionTTest>,
}

impl EvalReport {
    pub fn fid_matched(&self, condition: &str) -> Option<f64> {
        self.fid.get(condition)?.get(condition).copied()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Metric(e.to_string()))
    }
}

/// Per-condition image sets, indexed by label.
pub type ConditionSets = BTreeMap<usize, Tensor<f64>>;

pub fn real_sets(data: &Dataset) -> ConditionSets {
    let px = data.pixels.cast::<f64>();
    (0..data.manifest.conditions.len())
        .map(|c| (c, px.select(&data.indices_of(c))))
        .filter(|(_, t)| t.batch() > 0)
        .collect()
}

fn clamp_unit(t: &Tensor<f64>) -> Tensor<f64> {
    t.map(|v| v.clamp(-1.0, 1.0))
}

/// FID matrix, feature correlations and t-tests between real and generated
/// condition sets. Generated images are clamped to `[-1, 1]` first, as they
/// would be on export.
pub fn compare_sets(
    manifest: &DatasetManifest,
    real: &ConditionSets,
    generated: &ConditionSets,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let name = |c: usize| manifest.conditions[c].name.clone();
    let generated: ConditionSets = generated.iter().map(|(&c, t)| (c, clamp_unit(t))).collect();
    let all_real = Tensor::stack(&real.values().cloned().collect::<Vec<_>>())?;
    let embed_seed = seed::derive(cfg.seed, &[STREAM_EMBED]);
    let embedder = ProjectionEmbedder::fit_standardization(&all_real, cfg.embed_dim, embed_seed)?;

    let mut fids = BTreeMap::new();
    for (&rc, rset) in real {
        let mut row = BTreeMap::new();
        for (&gc, gset) in &generated {
            row.insert(name(gc), fid(rset, gset, &embedder)?);
        }
        fids.insert(name(rc), row);
    }

    let real_f: BTreeMap<usize, Vec<FeatureVector>> =
        real.iter().map(|(&c, t)| Ok((c, features_of(t)?))).collect::<Result<_>>()?;
    let gen_f: BTreeMap<usize, Vec<FeatureVector>> =
        generated.iter().map(|(&c, t)| Ok((c, features_of(t)?))).collect::<Result<_>>()?;
    let means = |v: &[FeatureVector]| -> Vec<f64> {
        (0..FEATURE_NAMES.len()).map(|k| v.iter().map(|f| f.0[k]).sum::<f64>() / v.len().max(1) as f64).collect()
    };
    let feature_means = manifest
        .conditions
        .iter()
        .filter(|c| real_f.contains_key(&c.index) && gen_f.contains_key(&c.index))
        .map(|c| FeatureMeans {
            condition: c.name.clone(),
            real: means(&real_f[&c.index]),
            generated: means(&gen_f[&c.index]),
        })
        .collect();
    let treatments: Vec<_> = manifest
        .treatments()
        .into_iter()
        .filter(|t| t.labels.iter().all(|l| real_f.contains_key(l) && gen_f.contains_key(l)))
        .collect();
    let correlations = condition_mean_correlation(&real_f, &gen_f, &treatments)?;

    let k = crate::eval::feature_index(&cfg.t_test_feature)?;
    let column = |sets: &BTreeMap<usize, Vec<FeatureVector>>, c: usize| -> Option<Vec<f64>> {
        sets.get(&c).map(|v| v.iter().map(|f| f.0[k]).collect())
    };
    let mut t_tests = Vec::new();
    if let Some(ctrl) = manifest.control() {
        for c in manifest.conditions.iter().filter(|c| c.index != ctrl) {
            let test = |sets: &BTreeMap<usize, Vec<FeatureVector>>| {
                let (a, b) = (column(sets, ctrl)?, column(sets, c.index)?);
                welch_t_test(&a, &b).ok()
            };
            t_tests.push(ConditionTTest {
                condition: c.name.clone(),
                feature: cfg.t_test_feature.clone(),
                real: test(&real_f),
                generated: test(&gen_f),
            });
        }
    }

    Ok(EvalReport {
        checkpoint: None,
        checkpoint_step: None,
        seed: cfg.seed,
        steps: None,
        source_condition: None,
        source_indices: Vec::new(),
        embedder: embedder.info(embed_seed),
        feature_names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
        fid: fids,
        reconstruction: Vec::new(),
        feature_means,
        correlations,
        t_tests,
    })
}

/// Generated sets and sources behind an [`EvalReport`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelEvaluation {
    pub report: EvalReport,
    pub sources: Tensor<f64>,
    /// Translations per target label; the control entry holds the
    /// reconstructions at `cfg.steps`.
    pub generated: ConditionSets,
}

/// Translates a seeded sample of held-out control images to every
/// condition, measures round-trip reconstruction at each configured step
/// count, and compares the generated sets with the held-out real sets.
pub fn evaluate_model<P: NoisePredictor>(
    model: &P,
    schedule: &NoiseSchedule,
    heldout: &Dataset,
    cfg: &EvalConfig,
    mut progress: impl FnMut(&str),
) -> Result<ModelEvaluation> {
    let manifest = &heldout.manifest;
    let ctrl = manifest.control().ok_or_else(|| Error::Dataset("no unique untreated (rank 0) condition".into()))?;
    let pool = heldout.indices_of(ctrl);
    if pool.len() < cfg.sources || cfg.sources == 0 {
        return Err(Error::Dataset(format!(
            "{} held-out control images, {} sources requested",
            pool.len(),
            cfg.sources
        )));
    }
    let mut picked = sample(&mut seed::rng(cfg.seed, &[STREAM_SOURCES]), pool.len(), cfg.sources).into_vec();
    picked.sort_unstable();
    let sources = heldout.pixels.select(&picked.iter().map(|&i| pool[i]).collect::<Vec<_>>()).cast::<f64>();
    let src_labels = vec![ctrl; sources.batch()];

    let mut reconstruction = Vec::new();
    for &s in &cfg.reconstruction_steps {
        if s == cfg.steps {
            continue;
        }
        progress(&format!("reconstruction at {s} steps"));
        let sub = StepSubsequence::uniform(schedule.len(), s)?;
        let latent = ddim_invert(model, &sources, &src_labels, &sub, schedule)?;
        let rec = ddim_sample(model, &latent, &src_labels, &sub, schedule, false)?.output;
        let stats = reconstruction_stats(&sources, &rec)?;
        reconstruction.push(ReconstructionSummary {
            steps: s,
            mean_sum: stats.mean_sum,
            mean_per_pixel: stats.mean_per_pixel,
            per_image: stats.per_image,
        });
    }

    progress(&format!("translation at {} steps", cfg.steps));
    let sub = StepSubsequence::uniform(schedule.len(), cfg.steps)?;
    let targets: Vec<usize> = (0..manifest.conditions.len()).filter(|&c| c != ctrl).collect();
    let result = translate(model, &sources, &src_labels, &targets, &sub, schedule)?;
    let stats = reconstruction_stats(&sources, &result.reconstruction)?;
    reconstruction.push(ReconstructionSummary {
        steps: cfg.steps,
        mean_sum: stats.mean_sum,
        mean_per_pixel: stats.mean_per_pixel,
        per_image: stats.per_image,
    });
    reconstruction.sort_by_key(|r| r.steps);

    let mut generated: ConditionSets = result.targets.into_iter().collect();
    generated.insert(ctrl, result.reconstruction);

    progress("metrics");
    let mut report = compare_sets(manifest, &real_sets(heldout), &generated, cfg)?;
    report.steps = Some(cfg.steps);
    report.source_condition = Some(manifest.conditions[ctrl].name.clone());
    report.source_indices = picked;
    report.reconstruction = reconstruction;
    Ok(ModelEvaluation { report, sources, generated })
}
