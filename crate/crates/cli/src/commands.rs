use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use phendiff::checkpoint::Checkpoint;
use phendiff::data::{generate_benchmark, load_dataset, load_image, save_grid, save_images, Split, SynthConfig, MANIFEST_FILE};
use phendiff::diffusion::NoiseDraw;
use phendiff::eval::{correlation_histogram_csv, reconstruction_stats, ReconstructionLoss};
use phendiff::pipeline::{compare_sets, evaluate_model, real_sets, ConditionSets, EvalConfig, EvalReport};
use phendiff::sampler::{ddim_invert, ddim_sample, dose_grid, translate as translate_images, DoseSeries};
use phendiff::schedule::{NoiseSchedule, StepSubsequence};
use phendiff::tensor::Tensor;
use phendiff::trainer::{self, TrainConfig};
use phendiff::{files, seed, Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::{EvaluateArgs, GridArgs, InvertArgs, SampleArgs, SynthArgs, TrainArgs, TranslateArgs};

const STREAM_SAMPLE: u64 = 30;
const DEFAULT_STEPS: usize = 100;

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    path.map_or_else(|| Ok(T::default()), files::read_toml)
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn set_some<T>(slot: &mut Option<T>, flag: Option<T>) {
    if flag.is_some() {
        *slot = flag;
    }
}

fn required<'a, T: ?Sized>(value: Option<&'a T>, flag: &str) -> Result<&'a T> {
    value.ok_or_else(|| Error::Config(format!("--{flag} is required")))
}

fn manifest_path(dataset: &Path) -> PathBuf {
    if dataset.is_dir() {
        dataset.join(MANIFEST_FILE)
    } else {
        dataset.to_path_buf()
    }
}

fn load_model(path: Option<&Path>) -> Result<(Checkpoint, NoiseSchedule)> {
    let ckpt = Checkpoint::load(required(path, "checkpoint")?)?;
    let schedule = ckpt.schedule()?;
    Ok((ckpt, schedule))
}

fn labels_of(ckpt: &Checkpoint, names: &[String]) -> Result<Vec<usize>> {
    names.iter().map(|n| ckpt.condition_index(n)).collect()
}

fn subsequence(schedule: &NoiseSchedule, steps: usize) -> Result<StepSubsequence> {
    StepSubsequence::uniform(schedule.len(), steps)
}

/// PNG files named directly or found (non-recursively) in directories, in
/// sorted order per directory.
fn collect_inputs(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut missing = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| Error::Io { path: p.clone(), source: e })?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
                .collect();
            found.sort();
            out.extend(found);
        } else if p.is_file() {
            out.push(p.clone());
        } else {
            missing.push(p.clone());
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingFiles(missing));
    }
    if out.is_empty() {
        return Err(Error::Config("no input images".into()));
    }
    Ok(out)
}

/// Loads images and names each by its file stem.
fn load_inputs(paths: &[PathBuf], shape: [usize; 3]) -> Result<(Tensor<f64>, Vec<String>)> {
    let files = collect_inputs(paths)?;
    let mut data = Vec::with_capacity(files.len() * shape.iter().product::<usize>());
    let mut names = Vec::with_capacity(files.len());
    for f in &files {
        data.extend(load_image(f, shape)?.into_iter().map(f64::from));
        let stem = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        if names.contains(&stem) {
            return Err(Error::Config(format!("two inputs are named `{stem}`")));
        }
        names.push(stem);
    }
    let [c, h, w] = shape;
    Ok((Tensor::from_vec([files.len(), c, h, w], data)?, names))
}

/// Latents as written by `invert` and `translate`.
#[derive(Serialize, Deserialize)]
struct LatentFile {
    source: String,
    steps: usize,
    checkpoint_step: u64,
    names: Vec<String>,
    shape: [usize; 4],
    data: Vec<f64>,
}

impl LatentFile {
    fn tensor(&self) -> Result<Tensor<f64>> {
        Tensor::from_vec(self.shape, self.data.clone())
    }
}

#[derive(Serialize)]
struct ReconstructionReport<'a> {
    steps: usize,
    mean_sum: f64,
    mean_per_pixel: f64,
    per_image: Vec<NamedLoss<'a>>,
}

#[derive(Serialize)]
struct NamedLoss<'a> {
    name: &'a str,
    #[serde(flatten)]
    loss: ReconstructionLoss,
}

fn reconstruction_report<'a>(
    x: &Tensor<f64>,
    rec: &Tensor<f64>,
    names: &'a [String],
    steps: usize,
) -> Result<ReconstructionReport<'a>> {
    let stats = reconstruction_stats(x, rec)?;
    Ok(ReconstructionReport {
        steps,
        mean_sum: stats.mean_sum,
        mean_per_pixel: stats.mean_per_pixel,
        per_image: names.iter().zip(stats.per_image).map(|(name, loss)| NamedLoss { name, loss }).collect(),
    })
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let mut cfg: SynthConfig = load_config(a.config.as_deref())?;
    set(&mut cfg.seed, a.seed);
    set(&mut cfg.images_per_condition, a.images_per_condition);
    set(&mut cfg.heldout_per_condition, a.heldout_per_condition);
    let bench = generate_benchmark(&cfg, &a.out)?;
    println!(
        "wrote {} conditions x {} images to {}",
        bench.manifest.conditions.len(),
        cfg.images_per_condition,
        a.out.display()
    );
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = load_config(a.config.as_deref())?;
    set(&mut cfg.dataset, a.dataset);
    set(&mut cfg.output_dir, a.out);
    set(&mut cfg.seed, a.seed);
    set(&mut cfg.epochs, a.epochs);
    set(&mut cfg.batch_size, a.batch_size);
    set(&mut cfg.learning_rate, a.lr);
    set_some(&mut cfg.max_steps, a.max_steps);
    set(&mut cfg.checkpoint_every, a.checkpoint_every);
    let mut window = Vec::new();
    let state = trainer::run(&cfg, a.checkpoint.as_deref(), |s| {
        window.extend(s.losses.last().map(|l| l.loss));
        if window.len() == 100 {
            eprintln!("step {} loss {:.5}", s.step, window.iter().sum::<f64>() / 100.0);
            window.clear();
        }
    })?;
    println!("trained to step {}; checkpoints in {}", state.step, cfg.output_dir.display());
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
struct SampleConfig {
    checkpoint: Option<PathBuf>,
    /// Empty means every condition.
    targets: Vec<String>,
    images_per_condition: usize,
    latents: Option<PathBuf>,
    steps: usize,
    seed: u64,
    out: Option<PathBuf>,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            checkpoint: None,
            targets: Vec::new(),
            images_per_condition: 8,
            latents: None,
            steps: DEFAULT_STEPS,
            seed: 0,
            out: None,
        }
    }
}

pub fn sample(a: SampleArgs) -> Result<()> {
    let mut cfg: SampleConfig = load_config(a.config.as_deref())?;
    set_some(&mut cfg.checkpoint, a.checkpoint);
    set(&mut cfg.targets, a.targets);
    set(&mut cfg.images_per_condition, a.images_per_condition);
    set_some(&mut cfg.latents, a.latents);
    set(&mut cfg.steps, a.steps);
    set(&mut cfg.seed, a.seed);
    set_some(&mut cfg.out, a.out);
    let out = required(cfg.out.as_deref(), "out")?;
    let (ckpt, schedule) = load_model(cfg.checkpoint.as_deref())?;
    let sub = subsequence(&schedule, cfg.steps)?;
    let targets = if cfg.targets.is_empty() { ckpt.header.conditions.clone() } else { cfg.targets.clone() };
    let labels = labels_of(&ckpt, &targets)?;
    let [c, h, w] = ckpt.model.image_shape();
    let (x_t, names) = match &cfg.latents {
        Some(p) => {
            let file: LatentFile = serde_json::from_slice(&files::read(p)?).map_err(|e| Error::Parse {
                path: p.clone(),
                message: e.to_string(),
            })?;
            (file.tensor()?, file.names)
        }
        None => {
            let n = cfg.images_per_condition;
            let noise = NoiseDraw::sample([n, c, h, w], seed::derive(cfg.seed, &[STREAM_SAMPLE])).epsilon;
            (noise, (0..n).map(|i| format!("{i:04}")).collect())
        }
    };
    files::publish_dir(out, |stage| {
        for (name, &label) in targets.iter().zip(&labels) {
            let y = vec![label; x_t.batch()];
            let x0 = ddim_sample(&ckpt.model, &x_t, &y, &sub, &schedule, false)?.output;
            save_images(&x0, &names, &stage.join(name))?;
        }
        files::write_toml(&stage.join("sample.toml"), &cfg)
    })?;
    println!("wrote {} images per condition for {} conditions to {}", names.len(), targets.len(), out.display());
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
struct InvertConfig {
    checkpoint: Option<PathBuf>,
    input: Vec<PathBuf>,
    source: Option<String>,
    steps: usize,
    out: Option<PathBuf>,
}

impl Default for InvertConfig {
    fn default() -> Self {
        InvertConfig { checkpoint: None, input: Vec::new(), source: None, steps: DEFAULT_STEPS, out: None }
    }
}

pub fn invert(a: InvertArgs) -> Result<()> {
    let mut cfg: InvertConfig = load_config(a.config.as_deref())?;
    set_some(&mut cfg.checkpoint, a.checkpoint);
    set(&mut cfg.input, a.input);
    set_some(&mut cfg.source, a.source);
    set(&mut cfg.steps, a.steps);
    set_some(&mut cfg.out, a.out);
    let out = required(cfg.out.as_deref(), "out")?;
    let source = required(cfg.source.as_deref(), "source")?;
    let (ckpt, schedule) = load_model(cfg.checkpoint.as_deref())?;
    let label = ckpt.condition_index(source)?;
    let sub = subsequence(&schedule, cfg.steps)?;
    let (x0, names) = load_inputs(&cfg.input, ckpt.model.image_shape())?;
    let y = vec![label; x0.batch()];
    let latent = ddim_invert(&ckpt.model, &x0, &y, &sub, &schedule)?;
    let rec = ddim_sample(&ckpt.model, &latent, &y, &sub, &schedule, false)?.output;
    let report = reconstruction_report(&x0, &rec, &names, cfg.steps)?;
    let latents = LatentFile {
        source: source.to_string(),
        steps: cfg.steps,
        checkpoint_step: ckpt.header.step,
        names: names.clone(),
        shape: latent.shape(),
        data: latent.into_data(),
    };
    files::publish_dir(out, |stage| {
        files::write_json(&stage.join("latents.json"), &latents)?;
        save_images(&rec, &names, &stage.join("reconstruction"))?;
        files::write_json(&stage.join("invert.json"), &report)?;
        files::write_toml(&stage.join("invert.toml"), &cfg)
    })?;
    println!("inverted {} images; reconstruction MSE per pixel {:.3e}", names.len(), report.mean_per_pixel);
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
struct TranslateConfig {
    checkpoint: Option<PathBuf>,
    input: Vec<PathBuf>,
    source: Option<String>,
    /// Empty means every condition other than the source.
    targets: Vec<String>,
    steps: usize,
    out: Option<PathBuf>,
}

impl Default for TranslateConfig {
    fn default() -> Self {
        TranslateConfig {
            checkpoint: None,
            input: Vec::new(),
            source: None,
            targets: Vec::new(),
            steps: DEFAULT_STEPS,
            out: None,
        }
    }
}

#[derive(Serialize)]
struct TranslationMetadata<'a> {
    source: &'a str,
    targets: &'a [String],
    steps: usize,
    checkpoint_step: u64,
    inputs: &'a [String],
    reconstruction: ReconstructionReport<'a>,
}

pub fn translate(a: TranslateArgs) -> Result<()> {
    let mut cfg: TranslateConfig = load_config(a.config.as_deref())?;
    set_some(&mut cfg.checkpoint, a.checkpoint);
    set(&mut cfg.input, a.input);
    set_some(&mut cfg.source, a.source);
    set(&mut cfg.targets, a.targets);
    set(&mut cfg.steps, a.steps);
    set_some(&mut cfg.out, a.out);
    let out = required(cfg.out.as_deref(), "out")?;
    let source = required(cfg.source.as_deref(), "source")?;
    let (ckpt, schedule) = load_model(cfg.checkpoint.as_deref())?;
    let label = ckpt.condition_index(source)?;
    let targets: Vec<String> = if cfg.targets.is_empty() {
        ckpt.header.conditions.iter().filter(|c| *c != source).cloned().collect()
    } else {
        cfg.targets.clone()
    };
    let target_labels = labels_of(&ckpt, &targets)?;
    let sub = subsequence(&schedule, cfg.steps)?;
    let (x0, names) = load_inputs(&cfg.input, ckpt.model.image_shape())?;
    let result = translate_images(&ckpt.model, &x0, &vec![label; x0.batch()], &target_labels, &sub, &schedule)?;
    let meta = TranslationMetadata {
        source,
        targets: &targets,
        steps: cfg.steps,
        checkpoint_step: ckpt.header.step,
        inputs: &names,
        reconstruction: reconstruction_report(&x0, &result.reconstruction, &names, cfg.steps)?,
    };
    let latents = LatentFile {
        source: source.to_string(),
        steps: cfg.steps,
        checkpoint_step: ckpt.header.step,
        names: names.clone(),
        shape: result.latent.shape(),
        data: result.latent.data().to_vec(),
    };
    files::publish_dir(out, |stage| {
        for (name, (_, images)) in targets.iter().zip(&result.targets) {
            save_images(images, &names, &stage.join(name))?;
        }
        save_images(&result.reconstruction, &names, &stage.join("reconstruction"))?;
        files::write_json(&stage.join("latents.json"), &latents)?;
        files::write_json(&stage.join("translation.json"), &meta)?;
        files::write_toml(&stage.join("translate.toml"), &cfg)
    })?;
    println!("translated {} images to {} conditions in {}", names.len(), targets.len(), out.display());
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
struct GridConfig {
    checkpoint: Option<PathBuf>,
    input: Option<PathBuf>,
    source: Option<String>,
    steps: usize,
    out: Option<PathBuf>,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { checkpoint: None, input: None, source: None, steps: DEFAULT_STEPS, out: None }
    }
}

/// Groups condition names of the form `<treatment>_<rank>` into series
/// ordered by rank. Other names, apart from `exclude`, form one-element
/// series of their own.
fn dose_series(conditions: &[String], exclude: usize) -> Vec<DoseSeries> {
    let mut groups: Vec<(String, Vec<(usize, usize)>)> = Vec::new();
    for (label, name) in conditions.iter().enumerate().filter(|&(l, _)| l != exclude) {
        let (treatment, rank) = match name.rsplit_once('_').and_then(|(t, r)| Some((t, r.parse::<usize>().ok()?))) {
            Some((t, r)) => (t.to_string(), r),
            None => (name.clone(), 0),
        };
        match groups.iter_mut().find(|(t, _)| *t == treatment) {
            Some((_, members)) => members.push((rank, label)),
            None => groups.push((treatment, vec![(rank, label)])),
        }
    }
    groups
        .into_iter()
        .map(|(treatment, mut members)| {
            members.sort_unstable();
            DoseSeries { treatment, labels: members.into_iter().map(|(_, l)| l).collect() }
        })
        .collect()
}

#[derive(Serialize)]
struct GridRow {
    treatment: String,
    conditions: Vec<String>,
}

pub fn grid(a: GridArgs) -> Result<()> {
    let mut cfg: GridConfig = load_config(a.config.as_deref())?;
    set_some(&mut cfg.checkpoint, a.checkpoint);
    set_some(&mut cfg.input, a.input);
    set_some(&mut cfg.source, a.source);
    set(&mut cfg.steps, a.steps);
    set_some(&mut cfg.out, a.out);
    let out = required(cfg.out.as_deref(), "out")?;
    let source = required(cfg.source.as_deref(), "source")?;
    let input = required(cfg.input.as_ref(), "input")?;
    let (ckpt, schedule) = load_model(cfg.checkpoint.as_deref())?;
    let label = ckpt.condition_index(source)?;
    let sub = subsequence(&schedule, cfg.steps)?;
    let series = dose_series(&ckpt.header.conditions, label);
    let (x0, _) = load_inputs(std::slice::from_ref(input), ckpt.model.image_shape())?;
    if x0.batch() != 1 {
        return Err(Error::Config("--input must name a single image".into()));
    }
    let grid = dose_grid(&ckpt.model, &x0, label, &series, &sub, &schedule)?;
    let rows: Vec<Vec<Tensor<f64>>> = grid
        .rows
        .iter()
        .map(|r| std::iter::once(grid.source.clone()).chain(r.images.iter().cloned()).collect())
        .collect();
    let layout: Vec<GridRow> = grid
        .rows
        .iter()
        .map(|r| GridRow {
            treatment: r.treatment.clone(),
            conditions: r.labels.iter().map(|&l| ckpt.header.conditions[l].clone()).collect(),
        })
        .collect();
    files::publish_dir(out, |stage| {
        save_grid(&rows, &stage.join("grid.png"))?;
        files::write_json(&stage.join("grid.json"), &layout)?;
        files::write_toml(&stage.join("grid.toml"), &cfg)
    })?;
    println!("wrote a {}-row dose grid to {}", rows.len(), out.join("grid.png").display());
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
struct EvaluateConfig {
    checkpoint: Option<PathBuf>,
    generated: Option<PathBuf>,
    dataset: Option<PathBuf>,
    /// Real images compared against: `heldout`, `train` or `all`.
    split: String,
    out: Option<PathBuf>,
    eval: EvalConfig,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            checkpoint: None,
            generated: None,
            dataset: None,
            split: "heldout".into(),
            out: None,
            eval: EvalConfig::default(),
        }
    }
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "heldout" => Ok(Split::Heldout),
        "train" => Ok(Split::Train),
        "all" => Ok(Split::All),
        other => Err(Error::Config(format!("unknown split `{other}`; expected heldout, train or all"))),
    }
}

fn fid_csv(report: &EvalReport) -> String {
    let columns: Vec<&String> = report.fid.values().next().map(|r| r.keys().collect()).unwrap_or_default();
    let mut out = String::from("real");
    for c in &columns {
        let _ = write!(out, ",{c}");
    }
    out.push('\n');
    for (real, row) in &report.fid {
        out.push_str(real);
        for c in &columns {
            let _ = write!(out, ",{}", row[*c]);
        }
        out.push('\n');
    }
    out
}

/// One set per condition directory found under `dir`.
fn load_generated(dir: &Path, conditions: &[String], shape: [usize; 3]) -> Result<ConditionSets> {
    let mut sets = BTreeMap::new();
    for (label, name) in conditions.iter().enumerate() {
        let sub = dir.join(name);
        if sub.is_dir() {
            sets.insert(label, load_inputs(&[sub], shape)?.0);
        }
    }
    if sets.is_empty() {
        return Err(Error::Dataset(format!("no condition directories under {}", dir.display())));
    }
    Ok(sets)
}

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    let mut cfg: EvaluateConfig = load_config(a.config.as_deref())?;
    set_some(&mut cfg.checkpoint, a.checkpoint);
    set_some(&mut cfg.generated, a.generated);
    set_some(&mut cfg.dataset, a.dataset);
    set(&mut cfg.split, a.split);
    set(&mut cfg.eval.steps, a.steps);
    set(&mut cfg.eval.sources, a.sources);
    set(&mut cfg.eval.seed, a.seed);
    set_some(&mut cfg.out, a.out);
    let out = required(cfg.out.as_deref(), "out")?;
    let manifest = manifest_path(required(cfg.dataset.as_deref(), "dataset")?);
    let (report, generated) = match (&cfg.checkpoint, &cfg.generated) {
        (Some(path), None) => {
            let (ckpt, schedule) = load_model(Some(path))?;
            let heldout = load_dataset(&manifest, parse_split(&cfg.split)?)?;
            if ckpt.header.conditions != heldout.manifest.condition_names() {
                return Err(Error::Config("checkpoint conditions differ from the dataset's".into()));
            }
            let run = evaluate_model(&ckpt.model, &schedule, &heldout, &cfg.eval, |m| eprintln!("{m}"))?;
            let mut report = run.report;
            report.checkpoint = Some(path.display().to_string());
            report.checkpoint_step = Some(ckpt.header.step);
            (report, Some((run.generated, heldout.manifest.condition_names())))
        }
        (None, Some(dir)) => {
            let real = load_dataset(&manifest, parse_split(&cfg.split)?)?;
            let names = real.manifest.condition_names();
            let gen = load_generated(dir, &names, real.manifest.image_shape())?;
            (compare_sets(&real.manifest, &real_sets(&real), &gen, &cfg.eval)?, None)
        }
        _ => return Err(Error::Config("exactly one of --checkpoint and --generated is required".into())),
    };
    files::publish_dir(out, |stage| {
        files::write_json(&stage.join("report.json"), &report)?;
        files::write_atomic(&stage.join("fid.csv"), fid_csv(&report).as_bytes())?;
        files::write_atomic(&stage.join("correlations.csv"), correlation_histogram_csv(&report.correlations).as_bytes())?;
        if let Some((sets, names)) = &generated {
            for (&label, images) in sets {
                let file_names: Vec<String> = (0..images.batch()).map(|i| format!("{i:04}")).collect();
                save_images(images, &file_names, &stage.join("generated").join(&names[label]))?;
            }
        }
        files::write_toml(&stage.join("evaluate.toml"), &cfg)
    })?;
    for (name, row) in &report.fid {
        if let Some(v) = row.get(name) {
            println!("FID {name}: {v:.4}");
        }
    }
    for t in &report.correlations {
        let defined: Vec<f64> = t.features.iter().filter_map(|f| f.r).collect();
        let strong = defined.iter().filter(|&&r| r > 0.9).count();
        println!("{}: {strong}/{} features with r > 0.9", t.treatment, defined.len());
    }
    println!("report written to {}", out.join("report.json").display());
    Ok(())
}
