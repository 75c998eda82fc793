mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use phendiff::data::{
    encode_png, generate_benchmark, grid_png, load_dataset, load_image, save_images, Phenotype, Split, SynthConfig,
    GRID_PAD, MANIFEST_FILE,
};
use phendiff::eval::extract_features;
use phendiff::tensor::Tensor;
use phendiff::Error;

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn component_count(img: &[f32], size: usize) -> f64 {
    let px: Vec<f64> = img.iter().map(|&v| v as f64).collect();
    extract_features(&px, [3, size, size]).unwrap().get("component_count").unwrap()
}

#[test]
fn same_seed_gives_identical_trees() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::small_synth(3, 1);
    generate_benchmark(&cfg, &dir.path().join("a")).unwrap();
    generate_benchmark(&cfg, &dir.path().join("b")).unwrap();
    let a = tree(&dir.path().join("a"));
    assert_eq!(a.len(), 4 * 3 + 3);
    assert_eq!(a, tree(&dir.path().join("b")));
    let other = SynthConfig { seed: 1, ..cfg };
    generate_benchmark(&other, &dir.path().join("c")).unwrap();
    assert_ne!(a, tree(&dir.path().join("c")));
}

#[test]
fn default_benchmark_structure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig { images_per_condition: 2, heldout_per_condition: 1, ..SynthConfig::default() };
    let bench = generate_benchmark(&cfg, dir.path()).unwrap();
    let m = &bench.manifest;
    assert_eq!(m.conditions.len(), 13);
    assert_eq!(m.image_shape(), [3, 32, 32]);
    assert_eq!(m.control(), Some(0));
    let groups = m.treatments();
    assert_eq!(groups.len(), 3);
    assert!(groups.iter().all(|g| g.labels.len() == 4));
    assert_eq!(bench.ground_truth.len(), 13 * 8);
    assert!(dir.path().join("ground_truth.csv").is_file());
    let all = load_dataset(&dir.path().join(MANIFEST_FILE), Split::All).unwrap();
    assert_eq!(all.len(), 26);
    assert_eq!(load_dataset(&dir.path().join(MANIFEST_FILE), Split::Heldout).unwrap().len(), 13);
}

#[test]
fn refuses_non_empty_output_and_leaves_no_partial_tree() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    fs::create_dir(&out).unwrap();
    fs::write(out.join("keep.txt"), b"x").unwrap();
    assert!(generate_benchmark(&common::small_synth(2, 1), &out).is_err());
    assert_eq!(tree(&out).len(), 1);

    let crowded = SynthConfig {
        control: Phenotype { count: 12.0, radius: 5.0, elongation: 1.0, intensity: [0.8, 0.5, 0.2] },
        max_count: 40,
        ..common::small_synth(2, 1)
    };
    let target = dir.path().join("crowded");
    assert!(matches!(generate_benchmark(&crowded, &target), Err(Error::Infeasible { .. })));
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
}

#[test]
fn component_counts_match_planted_cells() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig { images_per_condition: 20, heldout_per_condition: 0, ..SynthConfig::default() };
    let bench = generate_benchmark(&cfg, dir.path()).unwrap();
    let data = load_dataset(&dir.path().join(MANIFEST_FILE), Split::All).unwrap();
    for c in &bench.manifest.conditions {
        let counts = &bench.cell_counts[&c.name];
        for (k, &i) in data.indices_of(c.index).iter().enumerate() {
            assert_eq!(component_count(data.pixels.item(i), 32), counts[k] as f64, "{} image {k}", c.name);
        }
    }
}

#[test]
fn empty_condition_has_no_components() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::small_synth(5, 0);
    cfg.control.count = 0.0;
    generate_benchmark(&cfg, dir.path()).unwrap();
    let data = load_dataset(&dir.path().join(MANIFEST_FILE), Split::All).unwrap();
    for i in data.indices_of(0) {
        assert_eq!(component_count(data.pixels.item(i), 16), 0.0);
    }
}

#[test]
fn sample_mean_counts_follow_the_rate() {
    let dir = tempfile::tempdir().unwrap();
    let blob = |count| Phenotype { count, radius: 1.5, elongation: 1.0, intensity: [0.9, 0.4, 0.2] };
    let cfg = SynthConfig {
        image_size: 64,
        images_per_condition: 200,
        heldout_per_condition: 0,
        max_count: 60,
        control: blob(20.0),
        treatments: vec![phendiff::data::TreatmentCurve { name: "sparse".into(), ranks: vec![blob(5.0)] }],
        ..SynthConfig::default()
    };
    generate_benchmark(&cfg, dir.path()).unwrap();
    let data = load_dataset(&dir.path().join(MANIFEST_FILE), Split::All).unwrap();
    for (label, rate) in [(0, 20.0), (1, 5.0)] {
        let idx = data.indices_of(label);
        let mean = idx.iter().map(|&i| component_count(data.pixels.item(i), 64)).sum::<f64>() / idx.len() as f64;
        assert!((mean - rate).abs() < 0.1 * rate, "label {label}: mean count {mean}");
    }
}

#[test]
fn missing_files_are_reported_together() {
    let dir = tempfile::tempdir().unwrap();
    generate_benchmark(&common::small_synth(3, 1), dir.path()).unwrap();
    let gone = [dir.path().join("untreated/0001.png"), dir.path().join("toxin_2/0002.png")];
    for p in &gone {
        fs::remove_file(p).unwrap();
    }
    match load_dataset(&dir.path().join(MANIFEST_FILE), Split::All) {
        Err(Error::MissingFiles(paths)) => assert_eq!(paths, gone.to_vec()),
        other => panic!("expected MissingFiles, got {other:?}"),
    }
}

#[test]
fn batch_counts() {
    let dir = tempfile::tempdir().unwrap();
    generate_benchmark(&common::small_synth(5, 0), dir.path()).unwrap();
    let data = load_dataset(&dir.path().join(MANIFEST_FILE), Split::Train).unwrap();
    assert_eq!(data.len(), 20);
    let sizes: Vec<usize> = data.batches(6, Some(3), None).map(|b| b.len()).collect();
    assert_eq!(sizes, vec![6, 6, 6, 2]);
    let mut seen: Vec<f32> = data.batches(6, Some(3), None).flat_map(|b| b.pixels.into_data()).collect();
    let mut all = data.pixels.data().to_vec();
    seen.sort_by(f32::total_cmp);
    all.sort_by(f32::total_cmp);
    assert_eq!(seen, all);
}

#[test]
fn png_round_trip_within_quantization() {
    let dir = tempfile::tempdir().unwrap();
    let shape = [3, 5, 7];
    let n = 3 * 5 * 7;
    let values: Vec<f64> = (0..n).map(|i| -1.0 + 2.0 * (i as f64 * 0.6180339).fract()).collect();
    let t = Tensor::from_vec([1, 3, 5, 7], values.clone()).unwrap();
    let paths = save_images(&t, &["x".into()], dir.path()).unwrap();
    let back = load_image(&paths[0], shape).unwrap();
    for (a, b) in values.iter().zip(&back) {
        assert!((a - *b as f64).abs() <= 1.0 / 127.5 + 1e-7, "{a} vs {b}");
    }
    let empty = Tensor::<f64>::zeros([0, 3, 5, 7]);
    assert!(save_images(&empty, &[], &dir.path().join("none")).unwrap().is_empty());
    assert!(!dir.path().join("none").exists());
}

#[test]
fn one_cell_grid_is_the_image_inside_a_border() {
    let (c, h, w) = (3, 4, 6);
    let values: Vec<f64> = (0..c * h * w).map(|i| (i as f64 / 40.0) - 0.9).collect();
    let cell = Tensor::from_vec([1, c, h, w], values.clone()).unwrap();
    let grid = image::load_from_memory(&grid_png(&[vec![cell]]).unwrap()).unwrap().to_rgb8();
    let single = image::load_from_memory(&encode_png(&values, [c, h, w]).unwrap()).unwrap().to_rgb8();
    assert_eq!(grid.dimensions(), ((w + 2 * GRID_PAD) as u32, (h + 2 * GRID_PAD) as u32));
    for (x, y, px) in grid.enumerate_pixels() {
        let (x, y) = (x as usize, y as usize);
        let inside = (GRID_PAD..GRID_PAD + w).contains(&x) && (GRID_PAD..GRID_PAD + h).contains(&y);
        let expected = if inside { *single.get_pixel((x - GRID_PAD) as u32, (y - GRID_PAD) as u32) } else { image::Rgb([0, 0, 0]) };
        assert_eq!(*px, expected);
    }
}
