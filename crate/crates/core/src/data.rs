//! Datasets on disk and the synthetic phenotype benchmark.
//!
//! A dataset is a directory holding `manifest.toml` and one subdirectory of
//! 8-bit PNG files per condition. Paths in the manifest are relative to the
//! manifest's directory. Pixel values are stored as `u = round((x + 1) * 127.5)`
//! and read back as `x = 2u / 255 - 1`.
//!
//! Grid composites place cells row-major with [`GRID_PAD`] black pixels
//! between neighbouring cells and around the border.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::ImageEncoder;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::diffusion::{denormalize_u8, normalize_u8, ImageBatch};
use crate::error::{Error, Result};
use crate::files;
use crate::seed;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.csv";
pub const SYNTH_CONFIG_FILE: &str = "synth_config.toml";
pub const GRID_PAD: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelRole {
    Nuclear,
    Cytoskeleton,
    Other,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionEntry {
    pub index: usize,
    pub name: String,
    pub treatment: String,
    /// Concentration rank; 0 marks the untreated control.
    pub rank: usize,
    pub train: Vec<String>,
    pub heldout: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub image_size: usize,
    pub channels: Vec<ChannelRole>,
    pub conditions: Vec<ConditionEntry>,
}

/// Concentration series of one treatment: labels ordered by rank.
#[derive(Clone, Debug, PartialEq)]
pub struct TreatmentGroup {
    pub treatment: String,
    pub labels: Vec<usize>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let m: DatasetManifest = files::read_toml(path)?;
        m.validate().map_err(|e| Error::parse(path, e))?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        files::write_toml(path, self)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, c) in self.conditions.iter().enumerate() {
            if c.index != i {
                return Err(Error::Dataset(format!("condition `{}` has index {}, expected {i}", c.name, c.index)));
            }
            if self.conditions[..i].iter().any(|o| o.name == c.name) {
                return Err(Error::Dataset(format!("duplicate condition name `{}`", c.name)));
            }
        }
        if self.conditions.is_empty() {
            return Err(Error::Dataset("no conditions".into()));
        }
        if !matches!(self.channels.len(), 1 | 3) {
            return Err(Error::Dataset(format!("{} channels; only 1 or 3 are supported", self.channels.len())));
        }
        Ok(())
    }

    pub fn condition_names(&self) -> Vec<String> {
        self.conditions.iter().map(|c| c.name.clone()).collect()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.conditions
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| Error::Config(format!("unknown condition `{name}`")))
    }

    pub fn channel(&self, role: ChannelRole) -> Option<usize> {
        self.channels.iter().position(|&r| r == role)
    }

    /// The untreated control: the unique rank-0 condition, if any.
    pub fn control(&self) -> Option<usize> {
        let mut it = self.conditions.iter().filter(|c| c.rank == 0);
        match (it.next(), it.next()) {
            (Some(c), None) => Some(c.index),
            _ => None,
        }
    }

    /// Treated conditions grouped by treatment, in order of first appearance,
    /// each sorted by rank.
    pub fn treatments(&self) -> Vec<TreatmentGroup> {
        let mut groups: Vec<TreatmentGroup> = Vec::new();
        for c in self.conditions.iter().filter(|c| c.rank > 0) {
            match groups.iter_mut().find(|g| g.treatment == c.treatment) {
                Some(g) => g.labels.push(c.index),
                None => groups.push(TreatmentGroup { treatment: c.treatment.clone(), labels: vec![c.index] }),
            }
        }
        for g in &mut groups {
            g.labels.sort_by_key(|&l| self.conditions[l].rank);
        }
        groups
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels.len(), self.image_size, self.image_size]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Heldout,
    All,
}

/// Images of one split, decoded and normalized to `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub root: PathBuf,
    pub pixels: Tensor<f32>,
    pub labels: Vec<usize>,
    pub files: Vec<PathBuf>,
}

/// Loads every image of `split` listed in the manifest at `manifest_path`.
/// All missing or undecodable files are reported together.
pub fn load_dataset(manifest_path: &Path, split: Split) -> Result<Dataset> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let [c, h, w] = manifest.image_shape();
    let mut paths = Vec::new();
    let mut labels = Vec::new();
    for cond in &manifest.conditions {
        let lists: Vec<&Vec<String>> = match split {
            Split::Train => vec![&cond.train],
            Split::Heldout => vec![&cond.heldout],
            Split::All => vec![&cond.train, &cond.heldout],
        };
        for f in lists.into_iter().flatten() {
            paths.push(root.join(f));
            labels.push(cond.index);
        }
    }
    let mut data = Vec::with_capacity(paths.len() * c * h * w);
    let mut bad = Vec::new();
    for p in &paths {
        match load_image(p, [c, h, w]) {
            Ok(px) => data.extend(px),
            Err(_) => bad.push(p.clone()),
        }
    }
    if !bad.is_empty() {
        return Err(Error::MissingFiles(bad));
    }
    let pixels = Tensor::from_vec([paths.len(), c, h, w], data)?;
    Ok(Dataset { manifest, root, pixels, labels, files: paths })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Indices of the images carrying `label`, in manifest order.
    pub fn indices_of(&self, label: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == label).collect()
    }

    pub fn subset(&self, idx: &[usize]) -> ImageBatch {
        ImageBatch {
            pixels: self.pixels.select(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Batches in manifest order, or shuffled by `shuffle_seed`. With
    /// `flip_seed`, each image is independently mirrored horizontally and
    /// vertically with probability 1/2.
    pub fn batches(&self, batch_size: usize, shuffle_seed: Option<u64>, flip_seed: Option<u64>) -> Batches<'_> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        if let Some(s) = shuffle_seed {
            order.shuffle(&mut seed::rng(s, &[]));
        }
        Batches { data: self, order, pos: 0, batch_size: batch_size.max(1), flips: flip_seed.map(|s| seed::rng(s, &[])) }
    }
}

pub struct Batches<'a> {
    data: &'a Dataset,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    flips: Option<rand_chacha::ChaCha8Rng>,
}

impl Iterator for Batches<'_> {
    type Item = ImageBatch;

    fn next(&mut self) -> Option<ImageBatch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let mut batch = self.data.subset(&self.order[self.pos..end]);
        self.pos = end;
        if let Some(rng) = self.flips.as_mut() {
            let [_, c, h, w] = batch.pixels.shape();
            for i in 0..batch.len() {
                let (fx, fy) = (rng.gen_bool(0.5), rng.gen_bool(0.5));
                flip(batch.pixels.item_mut(i), c, h, w, fx, fy);
            }
        }
        Some(batch)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = (self.order.len() - self.pos).div_ceil(self.batch_size);
        (n, Some(n))
    }
}

fn flip(px: &mut [f32], c: usize, h: usize, w: usize, horizontal: bool, vertical: bool) {
    let src = px.to_vec();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let sy = if vertical { h - 1 - y } else { y };
                let sx = if horizontal { w - 1 - x } else { x };
                px[(ch * h + y) * w + x] = src[(ch * h + sy) * w + sx];
            }
        }
    }
}

/// PNG bytes of a CHW image in `[-1, 1]` (values outside are clamped).
pub fn encode_png(chw: &[f64], shape: [usize; 3]) -> Result<Vec<u8>> {
    let [c, h, w] = shape;
    if chw.len() != c * h * w {
        return Err(Error::Shape { expected: shape.to_vec(), got: vec![chw.len()] });
    }
    let mut raw = vec![0u8; c * h * w];
    for ch in 0..c {
        for p in 0..h * w {
            raw[p * c + ch] = denormalize_u8(chw[ch * h * w + p]);
        }
    }
    encode_raw(&raw, c, w, h)
}

fn encode_raw(raw: &[u8], c: usize, w: usize, h: usize) -> Result<Vec<u8>> {
    let color = match c {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        _ => return Err(Error::Shape { expected: vec![3], got: vec![c] }),
    };
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(raw, w as u32, h as u32, color)
        .map_err(|e| Error::Image { path: PathBuf::new(), source: e })?;
    Ok(out)
}

pub fn save_image(path: &Path, chw: &[f64], shape: [usize; 3]) -> Result<()> {
    let bytes = encode_png(chw, shape).map_err(|e| match e {
        Error::Image { source, .. } => Error::Image { path: path.to_path_buf(), source },
        other => other,
    })?;
    files::write_atomic(path, &bytes)
}

/// Decodes an 8-bit PNG of the given CHW shape into `[-1, 1]` values.
pub fn load_image(path: &Path, shape: [usize; 3]) -> Result<Vec<f32>> {
    let [c, h, w] = shape;
    let img = image::open(path).map_err(|e| Error::Image { path: path.to_path_buf(), source: e })?;
    if (img.width() as usize, img.height() as usize) != (w, h) {
        return Err(Error::Dataset(format!(
            "{}: size {}x{}, expected {w}x{h}",
            path.display(),
            img.width(),
            img.height()
        )));
    }
    let raw = match c {
        1 => img.to_luma8().into_raw(),
        3 => img.to_rgb8().into_raw(),
        _ => return Err(Error::Shape { expected: vec![3], got: vec![c] }),
    };
    let mut out = vec![0.0; c * h * w];
    for p in 0..h * w {
        for ch in 0..c {
            out[ch * h * w + p] = normalize_u8(raw[p * c + ch]);
        }
    }
    Ok(out)
}

/// Writes `images[i]` to `out_dir/names[i].png`. Returns the written paths.
pub fn save_images(images: &Tensor<f64>, names: &[String], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if names.len() != images.batch() {
        return Err(Error::Shape { expected: vec![images.batch()], got: vec![names.len()] });
    }
    if names.is_empty() {
        return Ok(Vec::new());
    }
    files::create_dir_all(out_dir)?;
    let [_, c, h, w] = images.shape();
    let mut written = Vec::with_capacity(names.len());
    for (i, name) in names.iter().enumerate() {
        let p = out_dir.join(format!("{name}.png"));
        save_image(&p, images.item(i), [c, h, w])?;
        written.push(p);
    }
    Ok(written)
}

/// Composites rows of single images into one PNG. Short rows are padded
/// with black cells.
pub fn grid_png(rows: &[Vec<Tensor<f64>>]) -> Result<Vec<u8>> {
    let first = rows
        .iter()
        .flatten()
        .next()
        .ok_or_else(|| Error::Shape { expected: vec![1], got: vec![0] })?;
    let [_, c, h, w] = first.shape();
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let gw = cols * (w + GRID_PAD) + GRID_PAD;
    let gh = rows.len() * (h + GRID_PAD) + GRID_PAD;
    let mut raw = vec![0u8; gw * gh * c];
    for (r, row) in rows.iter().enumerate() {
        for (k, cell) in row.iter().enumerate() {
            cell.ensure_shape([1, c, h, w])?;
            let (ox, oy) = (GRID_PAD + k * (w + GRID_PAD), GRID_PAD + r * (h + GRID_PAD));
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        raw[((oy + y) * gw + ox + x) * c + ch] = denormalize_u8(cell.data()[(ch * h + y) * w + x]);
                    }
                }
            }
        }
    }
    encode_raw(&raw, c, gw, gh)
}

pub fn save_grid(rows: &[Vec<Tensor<f64>>], out_path: &Path) -> Result<()> {
    files::write_atomic(out_path, &grid_png(rows)?)
}

/// Appearance of the cells in one condition. Intensities are on a `[0, 1]`
/// brightness scale per channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phenotype {
    /// Poisson rate of the number of cells per image.
    pub count: f64,
    /// Geometric-mean semi-axis of a nucleus, in pixels.
    pub radius: f64,
    /// Major to minor axis ratio of a nucleus.
    pub elongation: f64,
    pub intensity: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreatmentCurve {
    pub name: String,
    /// Phenotype at concentration ranks 1, 2, ...
    pub ranks: Vec<Phenotype>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub image_size: usize,
    pub images_per_condition: usize,
    /// How many of each condition's images go to the held-out split.
    pub heldout_per_condition: usize,
    pub seed: u64,
    /// Standard deviation of the additive pixel noise in `[-1, 1]` units.
    pub noise_sigma: f64,
    /// Cell counts are drawn from the Poisson law conditioned on not
    /// exceeding this.
    pub max_count: usize,
    /// Background pixels kept between any two nuclei.
    pub min_gap: usize,
    /// Cell body size relative to its nucleus.
    pub cell_scale: f64,
    /// Per-cell radius varies uniformly within this relative range.
    pub radius_jitter: f64,
    pub control_name: String,
    pub control: Phenotype,
    pub treatments: Vec<TreatmentCurve>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let control = Phenotype { count: 6.0, radius: 2.5, elongation: 1.0, intensity: [0.85, 0.45, 0.25] };
        let series = |f: &dyn Fn(f64) -> Phenotype| (1..=4).map(|k| f(k as f64)).collect::<Vec<_>>();
        let c = control.clone();
        let toxin = series(&|k| Phenotype {
            count: c.count - k,
            intensity: [c.intensity[0], c.intensity[1], c.intensity[2] + 0.15 * k],
            ..c.clone()
        });
        let contractor = series(&|k| Phenotype {
            radius: c.radius - 0.15 * k,
            intensity: [c.intensity[0], c.intensity[1] + 0.12 * k, c.intensity[2]],
            ..c.clone()
        });
        let extender = series(&|k| Phenotype {
            elongation: c.elongation + 0.3 * k,
            intensity: [c.intensity[0], c.intensity[1] - 0.08 * k, c.intensity[2]],
            ..c.clone()
        });
        SynthConfig {
            image_size: 32,
            images_per_condition: 500,
            heldout_per_condition: 100,
            seed: 0,
            noise_sigma: 0.05,
            max_count: 12,
            min_gap: 1,
            cell_scale: 1.8,
            radius_jitter: 0.1,
            control_name: "untreated".into(),
            control,
            treatments: vec![
                TreatmentCurve { name: "toxin".into(), ranks: toxin },
                TreatmentCurve { name: "contractor".into(), ranks: contractor },
                TreatmentCurve { name: "extender".into(), ranks: extender },
            ],
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.image_size < 8 {
            return fail(format!("image_size {} is below 8", self.image_size));
        }
        if self.heldout_per_condition > self.images_per_condition {
            return fail("heldout_per_condition exceeds images_per_condition".into());
        }
        if !(self.noise_sigma >= 0.0 && self.cell_scale >= 1.0) {
            return fail("noise_sigma must be non-negative and cell_scale at least 1".into());
        }
        if !(0.0..1.0).contains(&self.radius_jitter) {
            return fail("radius_jitter must lie in [0, 1)".into());
        }
        for (name, p) in self.conditions() {
            let ok = p.count >= 0.0
                && p.count.is_finite()
                && p.radius > 0.0
                && p.elongation >= 1.0
                && p.intensity.iter().all(|v| (0.0..=1.0).contains(v));
            if !ok {
                return fail(format!("condition `{name}` has an invalid phenotype {p:?}"));
            }
        }
        let mut names: Vec<String> = self.conditions().into_iter().map(|(n, _)| n).collect();
        names.sort();
        names.dedup();
        if names.len() != 1 + self.treatments.iter().map(|t| t.ranks.len()).sum::<usize>() {
            return fail("condition names must be unique".into());
        }
        Ok(())
    }

    /// `(name, phenotype)` for every condition in label order: the control,
    /// then each treatment's ranks.
    pub fn conditions(&self) -> Vec<(String, &Phenotype)> {
        let mut out = vec![(self.control_name.clone(), &self.control)];
        for t in &self.treatments {
            for (k, p) in t.ranks.iter().enumerate() {
                out.push((format!("{}_{}", t.name, k + 1), p));
            }
        }
        out
    }

    /// Expected cell count under the truncated Poisson law.
    pub fn expected_count(&self, rate: f64) -> f64 {
        if rate == 0.0 {
            return 0.0;
        }
        let (mut pmf, mut mass, mut mean) = ((-rate).exp(), 0.0, 0.0);
        for k in 0..=self.max_count {
            if k > 0 {
                pmf *= rate / k as f64;
            }
            mass += pmf;
            mean += k as f64 * pmf;
        }
        mean / mass
    }
}

/// One cell: nucleus centre, orientation and semi-axes.
#[derive(Clone, Copy, Debug)]
struct Cell {
    x: f64,
    y: f64,
    angle: f64,
    a: f64,
    b: f64,
}

/// Analytic pixel coverage of an ellipse scaled by `scale` around the cell.
fn coverage(cell: &Cell, scale: f64, px: f64, py: f64) -> f64 {
    let (dx, dy) = (px - cell.x, py - cell.y);
    let (s, c) = cell.angle.sin_cos();
    let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
    let (a, b) = (cell.a * scale, cell.b * scale);
    let q = ((u / a).powi(2) + (v / b).powi(2)).sqrt();
    let r = (u * u + v * v).sqrt();
    // distance to the boundary along the ray from the centre
    let d = if q > 0.0 { r * (1.0 - 1.0 / q) } else { -b };
    (0.5 - d).clamp(0.0, 1.0)
}

fn draw_count(rate: f64, max: usize, rng: &mut impl Rng) -> usize {
    if rate == 0.0 {
        return 0;
    }
    let law = Poisson::new(rate).expect("rate validated positive");
    loop {
        let n = law.sample(rng) as usize;
        if n <= max {
            return n;
        }
    }
}

/// Pixels whose centre gets non-zero nucleus coverage.
fn support(cell: &Cell, size: usize) -> Vec<usize> {
    let reach = (cell.a + 1.0).ceil() as isize;
    let (cx, cy) = (cell.x.floor() as isize, cell.y.floor() as isize);
    let mut out = Vec::new();
    for y in (cy - reach).max(0)..(cy + reach + 1).min(size as isize) {
        for x in (cx - reach).max(0)..(cx + reach + 1).min(size as isize) {
            if coverage(cell, 1.0, x as f64 + 0.5, y as f64 + 0.5) > 0.0 {
                out.push(y as usize * size + x as usize);
            }
        }
    }
    out
}

/// Rejection-samples `n` nuclei whose supports keep at least `min_gap`
/// background pixels between each other (Chebyshev distance), so nuclei
/// never touch after thresholding.
fn place_cells(cfg: &SynthConfig, p: &Phenotype, n: usize, rng: &mut impl Rng) -> Option<Vec<Cell>> {
    const LAYOUT_RESTARTS: usize = 50;
    const ATTEMPTS_PER_CELL: usize = 500;
    let size = cfg.image_size;
    let g = cfg.min_gap as isize;
    'layout: for _ in 0..LAYOUT_RESTARTS {
        let mut cells: Vec<Cell> = Vec::with_capacity(n);
        let mut taken = vec![false; size * size];
        for _ in 0..n {
            let scale = 1.0 + cfg.radius_jitter * rng.gen_range(-1.0..=1.0);
            let r = p.radius * scale;
            let (a, b) = (r * p.elongation.sqrt(), r / p.elongation.sqrt());
            let margin = a + 1.0;
            if 2.0 * margin >= size as f64 {
                return None;
            }
            let mut placed = false;
            for _ in 0..ATTEMPTS_PER_CELL {
                let cell = Cell {
                    x: rng.gen_range(margin..size as f64 - margin),
                    y: rng.gen_range(margin..size as f64 - margin),
                    angle: rng.gen_range(0.0..std::f64::consts::PI),
                    a,
                    b,
                };
                let sup = support(&cell, size);
                let clear = sup.iter().all(|&i| {
                    let (y, x) = ((i / size) as isize, (i % size) as isize);
                    (-g..=g).all(|dy| {
                        (-g..=g).all(|dx| {
                            let (yy, xx) = (y + dy, x + dx);
                            yy < 0
                                || xx < 0
                                || yy >= size as isize
                                || xx >= size as isize
                                || !taken[yy as usize * size + xx as usize]
                        })
                    })
                });
                if clear {
                    for i in sup {
                        taken[i] = true;
                    }
                    cells.push(cell);
                    placed = true;
                    break;
                }
            }
            if !placed {
                continue 'layout;
            }
        }
        return Some(cells);
    }
    None
}

/// Renders one image of the given phenotype. Returns CHW pixels in `[-1, 1]`
/// and the number of cells drawn.
fn render(cfg: &SynthConfig, name: &str, p: &Phenotype, rng: &mut impl Rng) -> Result<(Vec<f64>, usize)> {
    let n = draw_count(p.count, cfg.max_count, rng);
    let cells = place_cells(cfg, p, n, rng).ok_or_else(|| Error::Infeasible { condition: name.into(), count: n })?;
    let s = cfg.image_size;
    let mut bright = vec![0.0f64; 3 * s * s];
    for cell in &cells {
        let reach = (cell.a * cfg.cell_scale + 1.0).ceil() as isize;
        let (cx, cy) = (cell.x.floor() as isize, cell.y.floor() as isize);
        for y in (cy - reach).max(0)..(cy + reach + 1).min(s as isize) {
            for x in (cx - reach).max(0)..(cx + reach + 1).min(s as isize) {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let nucleus = coverage(cell, 1.0, px, py);
                let body = coverage(cell, cfg.cell_scale, px, py);
                let i = y as usize * s + x as usize;
                for (ch, cov) in [(0, nucleus), (1, body), (2, body)] {
                    let v = &mut bright[ch * s * s + i];
                    *v = v.max(p.intensity[ch] * cov);
                }
            }
        }
    }
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let px = bright.iter().map(|&b| (2.0 * b - 1.0 + noise.sample(rng)).clamp(-1.0, 1.0)).collect();
    Ok((px, n))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthRow {
    pub condition: String,
    pub parameter: String,
    pub expected: f64,
}

pub fn ground_truth(cfg: &SynthConfig) -> Vec<GroundTruthRow> {
    let mut rows = Vec::new();
    for (name, p) in cfg.conditions() {
        let mut push = |parameter: &str, expected: f64| {
            rows.push(GroundTruthRow { condition: name.clone(), parameter: parameter.into(), expected })
        };
        push("count_rate", p.count);
        push("expected_count", cfg.expected_count(p.count));
        push("radius", p.radius);
        push("nucleus_area", std::f64::consts::PI * p.radius * p.radius);
        push("elongation", p.elongation);
        for (ch, v) in p.intensity.iter().enumerate() {
            push(&format!("intensity_c{ch}"), *v);
        }
    }
    rows
}

pub fn ground_truth_csv(rows: &[GroundTruthRow]) -> String {
    let mut out = String::from("condition,parameter,expected\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.condition, r.parameter, r.expected);
    }
    out
}

/// Output of [`generate_benchmark`].
#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub manifest: DatasetManifest,
    pub ground_truth: Vec<GroundTruthRow>,
    /// Cells drawn in every image, per condition, in file order.
    pub cell_counts: BTreeMap<String, Vec<usize>>,
}

const STREAM_IMAGE: u64 = 1;

/// Renders the benchmark into `out_dir`, which must be absent or empty. The
/// tree is built in a sibling directory and renamed into place at the end,
/// so a failure never leaves a partial dataset behind.
pub fn generate_benchmark(cfg: &SynthConfig, out_dir: &Path) -> Result<Benchmark> {
    cfg.validate()?;
    files::publish_dir(out_dir, |stage| write_benchmark(cfg, stage))
}

fn write_benchmark(cfg: &SynthConfig, root: &Path) -> Result<Benchmark> {
    let s = cfg.image_size;
    let mut conditions = Vec::new();
    let mut cell_counts = BTreeMap::new();
    let mut index = 0;
    let mut emit = |name: String, treatment: &str, rank: usize, p: &Phenotype| -> Result<()> {
        files::create_dir_all(&root.join(&name))?;
        let mut names = Vec::with_capacity(cfg.images_per_condition);
        let mut counts = Vec::with_capacity(cfg.images_per_condition);
        for i in 0..cfg.images_per_condition {
            let mut rng = seed::rng(cfg.seed, &[STREAM_IMAGE, index as u64, i as u64]);
            let (px, n) = render(cfg, &name, p, &mut rng)?;
            let rel = format!("{name}/{i:04}.png");
            save_image(&root.join(&rel), &px, [3, s, s])?;
            names.push(rel);
            counts.push(n);
        }
        let heldout = names.split_off(cfg.images_per_condition - cfg.heldout_per_condition);
        conditions.push(ConditionEntry { index, name: name.clone(), treatment: treatment.into(), rank, train: names, heldout });
        cell_counts.insert(name, counts);
        index += 1;
        Ok(())
    };
    emit(cfg.control_name.clone(), &cfg.control_name, 0, &cfg.control)?;
    for t in &cfg.treatments {
        for (k, p) in t.ranks.iter().enumerate() {
            emit(format!("{}_{}", t.name, k + 1), &t.name, k + 1, p)?;
        }
    }
    let manifest = DatasetManifest {
        image_size: s,
        channels: vec![ChannelRole::Nuclear, ChannelRole::Cytoskeleton, ChannelRole::Other],
        conditions,
    };
    let gt = ground_truth(cfg);
    files::write_atomic(&root.join(GROUND_TRUTH_FILE), ground_truth_csv(&gt).as_bytes())?;
    files::write_toml(&root.join(SYNTH_CONFIG_FILE), cfg)?;
    manifest.save(&root.join(MANIFEST_FILE))?;
    Ok(Benchmark { manifest, ground_truth: gt, cell_counts })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_layout() {
        let cfg = SynthConfig::default();
        cfg.validate().unwrap();
        let names: Vec<String> = cfg.conditions().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.len(), 13);
        assert_eq!(names[0], "untreated");
        assert_eq!(names[4], "toxin_4");
        assert_eq!(names[12], "extender_4");
    }

    #[test]
    fn truncated_poisson_mean() {
        let cfg = SynthConfig { max_count: 1, ..SynthConfig::default() };
        // P(0) : P(1) = 1 : rate
        assert!((cfg.expected_count(2.0) - 2.0 / 3.0).abs() < 1e-12);
        let wide = SynthConfig { max_count: 200, ..SynthConfig::default() };
        assert!((wide.expected_count(6.0) - 6.0).abs() < 1e-9);
        assert_eq!(wide.expected_count(0.0), 0.0);
    }

    #[test]
    fn coverage_is_one_inside_zero_outside() {
        let cell = Cell { x: 10.0, y: 10.0, angle: 0.3, a: 4.0, b: 2.0 };
        assert_eq!(coverage(&cell, 1.0, 10.0, 10.0), 1.0);
        assert_eq!(coverage(&cell, 1.0, 20.0, 10.0), 0.0);
        let edge = coverage(&cell, 1.0, 10.0 + 4.0 * 0.3f64.cos(), 10.0 + 4.0 * 0.3f64.sin());
        assert!((edge - 0.5).abs() < 1e-9);
    }

    #[test]
    fn flip_twice_is_identity() {
        let orig: Vec<f32> = (0..2 * 3 * 4).map(|v| v as f32).collect();
        let mut px = orig.clone();
        flip(&mut px, 2, 3, 4, true, true);
        assert_ne!(px, orig);
        assert_eq!(px[0], orig[11]);
        flip(&mut px, 2, 3, 4, true, true);
        assert_eq!(px, orig);
    }

    #[test]
    fn rejects_invalid_synth_configs() {
        let mut c = SynthConfig::default();
        c.control.elongation = 0.5;
        assert!(c.validate().is_err());
        let c = SynthConfig { heldout_per_condition: 600, ..SynthConfig::default() };
        assert!(c.validate().is_err());
        let mut c = SynthConfig::default();
        c.treatments[1].name = "toxin".into();
        assert!(c.validate().is_err());
    }
}
