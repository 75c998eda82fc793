#![allow(dead_code)]

pub mod gradcheck;
pub mod oracle;

use std::path::Path;

use phendiff::data::{generate_benchmark, Phenotype, SynthConfig, TreatmentCurve};
use phendiff::denoiser::Architecture;
use phendiff::trainer::TrainConfig;

/// 16x16 images, a control and one three-rank treatment.
pub fn small_synth(images_per_condition: usize, heldout: usize) -> SynthConfig {
    let control = Phenotype { count: 1.5, radius: 1.6, elongation: 1.0, intensity: [0.85, 0.45, 0.25] };
    let ranks = (1..=3)
        .map(|k| Phenotype { count: 1.5 + k as f64, intensity: [0.85, 0.45, 0.25 + 0.2 * k as f64], ..control.clone() })
        .collect();
    SynthConfig {
        image_size: 16,
        images_per_condition,
        heldout_per_condition: heldout,
        max_count: 5,
        control,
        treatments: vec![TreatmentCurve { name: "toxin".into(), ranks }],
        ..SynthConfig::default()
    }
}

pub fn tiny_architecture() -> Architecture {
    Architecture {
        base_width: 8,
        channel_multipliers: vec![1, 2],
        blocks_per_level: 1,
        embed_dim: 16,
        attention_levels: Default::default(),
    }
}

/// A generated small dataset and a matching short training config.
pub fn small_run(root: &Path) -> TrainConfig {
    let data = root.join("data");
    generate_benchmark(&small_synth(6, 2), &data).unwrap();
    TrainConfig {
        epochs: 2,
        batch_size: 8,
        learning_rate: 1e-3,
        checkpoint_every: 2,
        architecture: tiny_architecture(),
        dataset: data,
        output_dir: root.join("run"),
        ..TrainConfig::default()
    }
}
