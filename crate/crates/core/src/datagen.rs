//! Synthetic shape datasets, manifests, tiling and the multi-source sampler.
//!
//! A scene generator draws non-overlapping coloured shapes on a smooth
//! textured background and records which shapes appear, disappear or are
//! replaced between the two dates. Labels are derived from the scene
//! afterwards, so two sources that disagree about which shape family counts
//! as change can be produced from identical imagery.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{s, Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data_model::{check_divisible, ClassVocabulary, GroundTruth, ImagePair, Sample, TaskKind};
use crate::error::{Error, Result};
use crate::io::{read_label, read_rgb, read_rgb_u8, write_label, write_rgb};

pub const MANIFEST_SCHEMA: u32 = 1;
pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeFamily {
    Square,
    Circle,
    Triangle,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 3] = [ShapeFamily::Square, ShapeFamily::Circle, ShapeFamily::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            ShapeFamily::Square => "square",
            ShapeFamily::Circle => "circle",
            ShapeFamily::Triangle => "triangle",
        }
    }

    fn colour(self) -> [f32; 3] {
        match self {
            ShapeFamily::Square => [0.85, 0.25, 0.2],
            ShapeFamily::Circle => [0.2, 0.75, 0.3],
            ShapeFamily::Triangle => [0.25, 0.35, 0.85],
        }
    }

    /// Whether pixel (v, u) of an `s × s` box is covered.
    fn covers(self, s: usize, v: usize, u: usize) -> bool {
        let (fv, fu, fs) = (v as f64 + 0.5, u as f64 + 0.5, s as f64);
        match self {
            ShapeFamily::Square => true,
            ShapeFamily::Circle => {
                let r = fs / 2.0;
                (fv - r).powi(2) + (fu - r).powi(2) <= r * r
            }
            ShapeFamily::Triangle => (fu - fs / 2.0).abs() <= fv / 2.0,
        }
    }
}

impl fmt::Display for ShapeFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown shape family {s:?}")))
    }
}

/// Number of samples per split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self { train: 8, val: 0, test: 8 }
    }
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    fn ranges(&self) -> [(&'static str, std::ops::Range<usize>); 3] {
        let a = self.train;
        let b = a + self.val;
        [("train", 0..a), ("val", a..b), ("test", b..b + self.test)]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub source_id: String,
    pub task: TaskKind,
    pub size: usize,
    /// Families drawn in every scene.
    pub families: Vec<ShapeFamily>,
    /// Binary sources: families whose changes are labelled. The remaining
    /// families still change but are background for this source.
    pub positive: Vec<ShapeFamily>,
    /// Target fraction of labelled change pixels per image.
    pub change_rate: f64,
    /// Standard deviation of per-pixel noise, independent per date.
    pub noise: f64,
    /// Unchanged shapes per family.
    pub static_shapes: usize,
    pub splits: SplitSizes,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            source_id: "synthetic".into(),
            task: TaskKind::Bcd,
            size: 64,
            families: vec![ShapeFamily::Square, ShapeFamily::Circle],
            positive: vec![ShapeFamily::Square],
            change_rate: 0.08,
            noise: 0.02,
            static_shapes: 1,
            splits: SplitSizes::default(),
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// Reads TOML or JSON (by extension) and validates.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: SyntheticSpec = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text)?,
            _ => toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        check_divisible(self.size, self.size)?;
        if !(0.0..1.0).contains(&self.change_rate) {
            return Err(Error::Config(format!("change rate {} outside [0, 1)", self.change_rate)));
        }
        if self.noise.is_nan() || self.noise < 0.0 {
            return Err(Error::Config("noise must be nonnegative".into()));
        }
        let uniq: HashSet<_> = self.families.iter().collect();
        if self.families.is_empty() || uniq.len() != self.families.len() {
            return Err(Error::Config("families must be non-empty and distinct".into()));
        }
        match self.task {
            TaskKind::Bcd => {
                if self.positive.is_empty() || self.positive.iter().any(|p| !self.families.contains(p)) {
                    return Err(Error::Config("positive families must be a non-empty subset of families".into()));
                }
            }
            TaskKind::Scd => {
                if self.families.len() < 2 {
                    return Err(Error::Config("semantic sources need at least 2 classes".into()));
                }
            }
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Result<ClassVocabulary> {
        match self.task {
            TaskKind::Bcd if self.positive.len() == 1 => ClassVocabulary::new([self.positive[0].name()]),
            TaskKind::Bcd => Ok(ClassVocabulary::binary()),
            TaskKind::Scd => ClassVocabulary::new(self.families.iter().map(|f| f.name())),
        }
    }

    /// Change-pixel budget for each family's events.
    fn family_budget(&self) -> f64 {
        let area = (self.size * self.size) as f64;
        match self.task {
            TaskKind::Bcd => self.change_rate * area / self.positive.len() as f64,
            TaskKind::Scd => self.change_rate * area / self.families.len() as f64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EventKind {
    Appear,
    Disappear,
    Replace,
}

#[derive(Clone, Debug)]
pub struct ChangeEvent {
    pub kind: EventKind,
    pub before: Option<ShapeFamily>,
    pub after: Option<ShapeFamily>,
    /// Top-left corner and side of the bounding box.
    pub origin: (usize, usize),
    pub side: usize,
}

/// Rendered imagery plus the family covering each changed pixel at each
/// date (`None` where nothing changed or the pixel is background).
#[derive(Clone, Debug)]
pub struct Scene {
    pub img1: Array3<f32>,
    pub img2: Array3<f32>,
    pub before: Array2<Option<ShapeFamily>>,
    pub after: Array2<Option<ShapeFamily>>,
    pub events: Vec<ChangeEvent>,
}

impl Scene {
    /// Binary labels: pixels where a positive family appeared or vanished.
    pub fn binary_labels(&self, positive: &[ShapeFamily]) -> Array2<u8> {
        let hit = |f: &Option<ShapeFamily>| f.is_some_and(|f| positive.contains(&f));
        ndarray::Zip::from(&self.before)
            .and(&self.after)
            .map_collect(|b, a| u8::from(hit(b) || hit(a)))
    }

    /// Semantic labels in the changed area; 0 elsewhere.
    pub fn semantic_labels(&self, classes: &[ShapeFamily]) -> (Array2<u8>, Array2<u8>) {
        let label = |f: &Option<ShapeFamily>| f.and_then(|f| classes.iter().position(|&c| c == f)).map_or(0, |i| i as u8 + 1);
        (self.before.map(label), self.after.map(label))
    }
}

struct Canvas {
    size: usize,
    occupied: Array2<bool>,
}

impl Canvas {
    /// Random free box with a 2-pixel margin, if one is found.
    fn place(&mut self, rng: &mut ChaCha8Rng) -> Option<((usize, usize), usize)> {
        let (lo, hi) = ((self.size / 8).max(4), (self.size / 4).max(5));
        for _ in 0..60 {
            let side = rng.random_range(lo..=hi);
            let y = rng.random_range(0..=self.size - side);
            let x = rng.random_range(0..=self.size - side);
            let (y0, x0) = (y.saturating_sub(2), x.saturating_sub(2));
            let (y1, x1) = ((y + side + 2).min(self.size), (x + side + 2).min(self.size));
            if self.occupied.slice(s![y0..y1, x0..x1]).iter().any(|&o| o) {
                continue;
            }
            self.occupied.slice_mut(s![y..y + side, x..x + side]).fill(true);
            return Some(((y, x), side));
        }
        None
    }
}

fn background(size: usize, rng: &mut ChaCha8Rng) -> Array3<f32> {
    let tau = std::f64::consts::TAU;
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.5..3.0),
                rng.random_range(0.5..3.0),
                rng.random_range(0.0..tau),
                rng.random_range(0.02..0.06),
            )
        })
        .collect();
    let tint: Vec<f64> = (0..3).map(|_| rng.random_range(-0.04..0.04)).collect();
    Array3::from_shape_fn((size, size, 3), |(y, x, c)| {
        let (fy, fx) = (y as f64 / size as f64, x as f64 / size as f64);
        let tex: f64 = waves
            .iter()
            .map(|&(a, b, phi, amp)| amp * (tau * (a * fy + b * fx) + phi + c as f64 * 0.7).sin())
            .sum();
        (0.45 + tint[c] + tex) as f32
    })
}

fn draw(img: &mut Array3<f32>, family: ShapeFamily, origin: (usize, usize), side: usize, colour: [f32; 3]) {
    for v in 0..side {
        for u in 0..side {
            if family.covers(side, v, u) {
                for c in 0..3 {
                    img[[origin.0 + v, origin.1 + u, c]] = colour[c];
                }
            }
        }
    }
}

fn mark(map: &mut Array2<Option<ShapeFamily>>, family: ShapeFamily, origin: (usize, usize), side: usize) {
    for v in 0..side {
        for u in 0..side {
            if family.covers(side, v, u) {
                map[[origin.0 + v, origin.1 + u]] = Some(family);
            }
        }
    }
}

fn footprint(family: ShapeFamily, side: usize) -> usize {
    (0..side)
        .flat_map(|v| (0..side).map(move |u| (v, u)))
        .filter(|&(v, u)| family.covers(side, v, u))
        .count()
}

fn jittered(family: ShapeFamily, rng: &mut ChaCha8Rng) -> [f32; 3] {
    let c = family.colour();
    let j = rng.random_range(-0.05f32..0.05);
    [c[0] + j, c[1] + j, c[2] + j]
}

/// One scene. Depends only on the image size, families, per-family budget,
/// noise level, static shape count, task and seed; never on labelling.
pub fn generate_scene(spec: &SyntheticSpec, seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = spec.size;
    let base = background(size, &mut rng);
    let mut img1 = base.clone();
    let mut img2 = base;
    let mut canvas = Canvas {
        size,
        occupied: Array2::from_elem((size, size), false),
    };
    let mut before = Array2::from_elem((size, size), None);
    let mut after = Array2::from_elem((size, size), None);
    let mut events = Vec::new();

    for &family in &spec.families {
        for _ in 0..spec.static_shapes {
            if let Some((o, side)) = canvas.place(&mut rng) {
                let col = jittered(family, &mut rng);
                draw(&mut img1, family, o, side, col);
                draw(&mut img2, family, o, side, col);
            }
        }
    }

    let budget = spec.family_budget();
    for &family in &spec.families {
        let mut spent = 0.0;
        let mut misses = 0;
        while spent < budget && misses < 5 {
            let Some((o, side)) = canvas.place(&mut rng) else {
                misses += 1;
                continue;
            };
            let area = footprint(family, side) as f64;
            // stop at the event count that lands closest to the budget
            if spent + area / 2.0 > budget {
                break;
            }
            spent += area;
            let kind = match (spec.task, rng.random_range(0..3)) {
                (TaskKind::Scd, 2) => EventKind::Replace,
                (_, k) if k % 2 == 0 => EventKind::Appear,
                _ => EventKind::Disappear,
            };
            let other = match kind {
                EventKind::Replace => {
                    let others: Vec<_> = spec.families.iter().copied().filter(|&f| f != family).collect();
                    Some(others[rng.random_range(0..others.len())])
                }
                _ => None,
            };
            let col = jittered(family, &mut rng);
            let (b, a) = match kind {
                EventKind::Appear => (None, Some(family)),
                EventKind::Disappear => (Some(family), None),
                EventKind::Replace => (other, Some(family)),
            };
            if let Some(f) = b {
                let c = if f == family { col } else { jittered(f, &mut rng) };
                draw(&mut img1, f, o, side, c);
                mark(&mut before, f, o, side);
            }
            if let Some(f) = a {
                draw(&mut img2, f, o, side, col);
                mark(&mut after, f, o, side);
            }
            events.push(ChangeEvent {
                kind,
                before: b,
                after: a,
                origin: o,
                side,
            });
        }
    }

    if spec.noise > 0.0 {
        let n = Normal::new(0.0f32, spec.noise as f32).expect("finite noise");
        img1.mapv_inplace(|v| v + n.sample(&mut rng));
        img2.mapv_inplace(|v| v + n.sample(&mut rng));
    }
    img1.mapv_inplace(|v| v.clamp(0.0, 1.0));
    img2.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Scene {
        img1,
        img2,
        before,
        after,
        events,
    }
}

fn labelled_sample(spec: &SyntheticSpec, vocab: &ClassVocabulary, scene: Scene) -> Result<Sample> {
    let gt = match spec.task {
        TaskKind::Bcd => GroundTruth::binary(scene.binary_labels(&spec.positive)),
        TaskKind::Scd => {
            let (s1, s2) = scene.semantic_labels(&spec.families);
            GroundTruth::semantic(s1, s2)?
        }
    };
    Ok(Sample {
        pair: ImagePair::new(scene.img1, scene.img2)?,
        gt,
        source_id: spec.source_id.clone(),
        vocabulary: vocab.clone(),
    })
}

/// `count` samples with seeds `seed + first .. seed + first + count`.
pub fn generate_samples(spec: &SyntheticSpec, first: usize, count: usize) -> Result<Vec<Sample>> {
    spec.validate()?;
    let vocab = spec.vocabulary()?;
    (first..first + count)
        .map(|i| labelled_sample(spec, &vocab, generate_scene(spec, spec.seed.wrapping_add(i as u64))))
        .collect()
}

/// Binary source: labelled changes of the positive families only.
pub fn generate_bcd_source(spec: &SyntheticSpec) -> Result<Vec<Sample>> {
    if spec.task != TaskKind::Bcd {
        return Err(Error::Config("binary generator needs task bcd".into()));
    }
    generate_samples(spec, 0, spec.splits.total())
}

/// Semantic source: from-to labels of every family.
pub fn generate_scd_source(spec: &SyntheticSpec) -> Result<Vec<Sample>> {
    if spec.task != TaskKind::Scd {
        return Err(Error::Config("semantic generator needs task scd".into()));
    }
    generate_samples(spec, 0, spec.splits.total())
}

/// All splits of a synthetic source, in memory.
pub fn generate_splits(spec: &SyntheticSpec) -> Result<BTreeMap<String, Vec<Sample>>> {
    spec.splits
        .ranges()
        .into_iter()
        .map(|(name, r)| Ok((name.to_string(), generate_samples(spec, r.start, r.len())?)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SampleRecord {
    pub img1: String,
    pub img2: String,
    pub change: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sem1: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sem2: Option<String>,
}

impl SampleRecord {
    fn paths(&self) -> impl Iterator<Item = &String> {
        [
            Some(&self.img1),
            Some(&self.img2),
            Some(&self.change),
            self.sem1.as_ref(),
            self.sem2.as_ref(),
        ]
        .into_iter()
        .flatten()
    }
}

/// On-disk dataset description. Record paths are relative to `root`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema: u32,
    pub source_id: String,
    pub task: TaskKind,
    pub vocabulary: ClassVocabulary,
    pub splits: BTreeMap<String, Vec<SampleRecord>>,
    pub seed: u64,
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn split(&self, name: &str) -> Result<&[SampleRecord]> {
        self.splits
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Invalid(format!("manifest {} has no split {name:?}", self.source_id)))
    }

    fn check(&self) -> Result<()> {
        if self.schema != MANIFEST_SCHEMA {
            return Err(Error::Config(format!("unsupported manifest schema {}", self.schema)));
        }
        let mut seen = HashSet::new();
        for (name, records) in &self.splits {
            for r in records {
                for p in r.paths() {
                    let full = self.root.join(p);
                    if !full.is_file() {
                        return Err(Error::io(full, std::io::Error::from(std::io::ErrorKind::NotFound)));
                    }
                }
                if r.sem1.is_some() != self.task.is_scd() || r.sem2.is_some() != self.task.is_scd() {
                    return Err(Error::Invalid(format!(
                        "record {} in {name} does not match task {}",
                        r.img1, self.task
                    )));
                }
                if !seen.insert(&r.img1) {
                    return Err(Error::Invalid(format!("record {} appears in more than one split", r.img1)));
                }
            }
        }
        if self.task == TaskKind::Bcd && self.vocabulary.len() != 1 {
            return Err(Error::Invalid("binary manifest needs exactly one class".into()));
        }
        Ok(())
    }
}

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

/// Reads a manifest and checks every referenced file exists.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut m: DatasetManifest = serde_json::from_str(&text)?;
    m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    m.check()?;
    Ok(m)
}

fn check_labels(map: &Array2<u8>, classes: usize, path: &Path) -> Result<()> {
    match map.iter().max() {
        Some(&v) if v as usize > classes => Err(Error::LabelRange {
            value: v as u32,
            classes,
            path: Some(path.to_path_buf()),
        }),
        _ => Ok(()),
    }
}

/// Loads every sample of a split.
pub fn load_samples(manifest: &DatasetManifest, split: &str) -> Result<Vec<Sample>> {
    let n = manifest.vocabulary.len();
    manifest
        .split(split)?
        .iter()
        .map(|r| {
            let at = |p: &str| manifest.root.join(p);
            let pair = ImagePair::new(read_rgb(&at(&r.img1))?, read_rgb(&at(&r.img2))?)?;
            let change = read_label(&at(&r.change))?;
            check_labels(&change, 1, &at(&r.change))?;
            let gt = match (&r.sem1, &r.sem2) {
                (Some(a), Some(b)) => {
                    let (s1, s2) = (read_label(&at(a))?, read_label(&at(b))?);
                    check_labels(&s1, n, &at(a))?;
                    check_labels(&s2, n, &at(b))?;
                    GroundTruth {
                        change_mask: change,
                        sem_t1: Some(s1),
                        sem_t2: Some(s2),
                    }
                }
                _ => GroundTruth::binary(change),
            };
            Ok(Sample {
                pair,
                gt,
                source_id: manifest.source_id.clone(),
                vocabulary: manifest.vocabulary.clone(),
            })
        })
        .collect()
}

/// Writes samples as PNGs under `root/<split>/` and saves `root/manifest.json`.
pub fn write_dataset(
    root: &Path,
    source_id: &str,
    task: TaskKind,
    vocabulary: &ClassVocabulary,
    splits: &BTreeMap<String, Vec<Sample>>,
    seed: u64,
) -> Result<DatasetManifest> {
    let mut records = BTreeMap::new();
    for (split, samples) in splits {
        let mut out = Vec::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            let rel = |kind: &str| format!("{split}/{i:05}_{kind}.png");
            write_rgb(&root.join(rel("t1")), &s.pair.img1)?;
            write_rgb(&root.join(rel("t2")), &s.pair.img2)?;
            write_label(&root.join(rel("change")), &s.gt.change_mask)?;
            let mut rec = SampleRecord {
                img1: rel("t1"),
                img2: rel("t2"),
                change: rel("change"),
                sem1: None,
                sem2: None,
            };
            if let (Some(a), Some(b)) = (&s.gt.sem_t1, &s.gt.sem_t2) {
                write_label(&root.join(rel("sem1")), a)?;
                write_label(&root.join(rel("sem2")), b)?;
                rec.sem1 = Some(rel("sem1"));
                rec.sem2 = Some(rel("sem2"));
            }
            out.push(rec);
        }
        records.insert(split.clone(), out);
    }
    let manifest = DatasetManifest {
        schema: MANIFEST_SCHEMA,
        source_id: source_id.to_string(),
        task,
        vocabulary: vocabulary.clone(),
        splits: records,
        seed,
        root: root.to_path_buf(),
    };
    save_manifest(&manifest, &root.join("manifest.json"))?;
    Ok(manifest)
}

/// Generates a synthetic source on disk.
pub fn write_synthetic(spec: &SyntheticSpec, root: &Path) -> Result<DatasetManifest> {
    let splits = generate_splits(spec)?;
    write_dataset(root, &spec.source_id, spec.task, &spec.vocabulary()?, &splits, spec.seed)
}

/// Top-left corners of the full tiles of an `h × w` image, row-major.
pub fn tile_grid(h: usize, w: usize, tile: usize) -> Result<Vec<(usize, usize)>> {
    if tile == 0 || tile > h || tile > w {
        return Err(Error::Invalid(format!("tile {tile} does not fit a {h}x{w} image")));
    }
    Ok((0..h / tile)
        .flat_map(|r| (0..w / tile).map(move |c| (r * tile, c * tile)))
        .collect())
}

/// Split sizes for `n` items: validation and test are floored, training
/// takes the remainder.
pub fn split_counts(n: usize, ratios: (u32, u32, u32)) -> Result<(usize, usize, usize)> {
    let sum = (ratios.0 + ratios.1 + ratios.2) as usize;
    if sum == 0 {
        return Err(Error::Invalid("split ratios sum to zero".into()));
    }
    let val = n * ratios.1 as usize / sum;
    let test = n * ratios.2 as usize / sum;
    Ok((n - val - test, val, test))
}

/// Cuts a large sample into tiles, shuffles them under `seed` and splits
/// contiguously by `ratios` (train, val, test).
pub fn tile_pair(sample: &Sample, tile: usize, ratios: (u32, u32, u32), seed: u64) -> Result<BTreeMap<String, Vec<Sample>>> {
    let (h, w) = (sample.pair.height(), sample.pair.width());
    let mut corners = tile_grid(h, w, tile)?;
    corners.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let crop3 = |a: &Array3<f32>, (y, x): (usize, usize)| a.slice(s![y..y + tile, x..x + tile, ..]).to_owned();
    let crop2 = |a: &Array2<u8>, (y, x): (usize, usize)| a.slice(s![y..y + tile, x..x + tile]).to_owned();
    let tiles = corners
        .iter()
        .map(|&c| {
            Ok(Sample {
                pair: ImagePair::new(crop3(&sample.pair.img1, c), crop3(&sample.pair.img2, c))?,
                gt: GroundTruth {
                    change_mask: crop2(&sample.gt.change_mask, c),
                    sem_t1: sample.gt.sem_t1.as_ref().map(|m| crop2(m, c)),
                    sem_t2: sample.gt.sem_t2.as_ref().map(|m| crop2(m, c)),
                },
                source_id: sample.source_id.clone(),
                vocabulary: sample.vocabulary.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (tr, va, _) = split_counts(tiles.len(), ratios)?;
    let mut it = tiles.into_iter();
    let mut out = BTreeMap::new();
    out.insert("train".to_string(), it.by_ref().take(tr).collect());
    out.insert("val".to_string(), it.by_ref().take(va).collect());
    out.insert("test".to_string(), it.collect());
    Ok(out)
}

/// A batch of sample indices drawn from one source.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceBatch {
    pub source: usize,
    pub indices: Vec<usize>,
}

/// Single-source batches interleaved across sources in proportion to their
/// sizes. Each epoch shuffles every source, cuts it into batches and then
/// shuffles the order of all batches.
#[derive(Clone, Debug)]
pub struct MixedSampler {
    sizes: Vec<usize>,
    batch_size: usize,
    seed: u64,
}

impl MixedSampler {
    pub fn new(sizes: Vec<usize>, batch_size: usize, seed: u64) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::Invalid("sampler needs at least one source".into()));
        }
        if let Some(i) = sizes.iter().position(|&n| n == 0) {
            return Err(Error::Invalid(format!("source {i} has no training samples")));
        }
        if batch_size == 0 {
            return Err(Error::Invalid("batch size must be positive".into()));
        }
        Ok(Self { sizes, batch_size, seed })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.sizes.iter().map(|n| n.div_ceil(self.batch_size)).sum()
    }

    pub fn epoch(&self, epoch: u64) -> Vec<SourceBatch> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(epoch));
        let mut per_source: Vec<std::vec::IntoIter<Vec<usize>>> = self
            .sizes
            .iter()
            .map(|&n| {
                let mut idx: Vec<usize> = (0..n).collect();
                idx.shuffle(&mut rng);
                idx.chunks(self.batch_size).map(<[usize]>::to_vec).collect::<Vec<_>>().into_iter()
            })
            .collect();
        let mut order: Vec<usize> = per_source
            .iter()
            .enumerate()
            .flat_map(|(s, b)| std::iter::repeat_n(s, b.len()))
            .collect();
        order.shuffle(&mut rng);
        order
            .into_iter()
            .map(|s| SourceBatch {
                source: s,
                indices: per_source[s].next().expect("batch count matches"),
            })
            .collect()
    }

    /// Endless stream starting at (`epoch`, `offset`).
    pub fn stream_from(&self, epoch: u64, offset: usize) -> impl Iterator<Item = (u64, usize, SourceBatch)> + '_ {
        (epoch..).flat_map(move |e| {
            let skip = if e == epoch { offset } else { 0 };
            self.epoch(e).into_iter().enumerate().skip(skip).map(move |(i, b)| (e, i, b))
        })
    }

    pub fn stream(&self) -> impl Iterator<Item = SourceBatch> + '_ {
        self.stream_from(0, 0).map(|(_, _, b)| b)
    }
}

/// Directory conventions of public change detection datasets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetLayout {
    /// `A/`, `B/`, `label/` with 0/255 masks (WHU-CD, LEVIR-CD+).
    Whu,
    Levir,
    /// `Image1/`, `Image2/`, `label/` (S2Looking).
    S2Looking,
    /// `im1/`, `im2/`, `label1/`, `label2/` with RGB-coded classes (SECOND).
    Second,
}

impl FromStr for DatasetLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "whu" | "whu-cd" => Ok(Self::Whu),
            "levir" | "levir-cd" | "levir-cd+" => Ok(Self::Levir),
            "s2looking" => Ok(Self::S2Looking),
            "second" => Ok(Self::Second),
            other => Err(Error::Config(format!("unknown dataset layout {other:?}"))),
        }
    }
}

/// Class colours of the SECOND label maps; white is no change.
pub const SECOND_CLASSES: [(&str, [u8; 3]); 6] = [
    ("water", [0, 0, 255]),
    ("ground", [128, 128, 128]),
    ("vegetation", [0, 128, 0]),
    ("tree", [0, 255, 0]),
    ("building", [128, 0, 0]),
    ("playground", [255, 0, 0]),
];

fn second_labels(path: &Path) -> Result<Array2<u8>> {
    let rgb = read_rgb_u8(path)?;
    let (h, w, _) = rgb.dim();
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let px = [rgb[[y, x, 0]], rgb[[y, x, 1]], rgb[[y, x, 2]]];
            if px == [255, 255, 255] {
                continue;
            }
            let k = SECOND_CLASSES.iter().position(|(_, c)| *c == px).ok_or_else(|| Error::Image {
                path: path.to_path_buf(),
                message: format!("colour {px:?} at ({y}, {x}) is not a class colour"),
            })?;
            out[[y, x]] = k as u8 + 1;
        }
    }
    Ok(out)
}

fn sorted_pngs(dir: &Path) -> Result<Vec<String>> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.to_ascii_lowercase().ends_with(".png"))
        .collect();
    names.sort();
    Ok(names)
}

/// Reads a public dataset laid out as `root/<split>/<subdirs>/<name>.png`.
/// Splits that are absent are skipped.
pub fn ingest_directory(
    root: &Path,
    layout: DatasetLayout,
    source_id: &str,
) -> Result<(TaskKind, ClassVocabulary, BTreeMap<String, Vec<Sample>>)> {
    let (task, vocab) = match layout {
        DatasetLayout::Second => (TaskKind::Scd, ClassVocabulary::new(SECOND_CLASSES.iter().map(|(n, _)| *n))?),
        DatasetLayout::Whu | DatasetLayout::Levir => (TaskKind::Bcd, ClassVocabulary::new(["building"])?),
        DatasetLayout::S2Looking => (TaskKind::Bcd, ClassVocabulary::binary()),
    };
    let dirs: &[&str] = match layout {
        DatasetLayout::Whu | DatasetLayout::Levir => &["A", "B", "label"],
        DatasetLayout::S2Looking => &["Image1", "Image2", "label"],
        DatasetLayout::Second => &["im1", "im2", "label1", "label2"],
    };
    let mut splits = BTreeMap::new();
    for split in SPLITS {
        let base = root.join(split);
        if !base.is_dir() {
            continue;
        }
        let mut samples = Vec::new();
        for name in sorted_pngs(&base.join(dirs[0]))? {
            let at = |d: &str| base.join(d).join(&name);
            let pair = ImagePair::new(read_rgb(&at(dirs[0]))?, read_rgb(&at(dirs[1]))?)?;
            let gt = if task.is_scd() {
                GroundTruth::semantic(second_labels(&at(dirs[2]))?, second_labels(&at(dirs[3]))?)?
            } else {
                GroundTruth::binary(read_label(&at(dirs[2]))?.mapv(|v| u8::from(v > 0)))
            };
            samples.push(Sample {
                pair,
                gt,
                source_id: source_id.to_string(),
                vocabulary: vocab.clone(),
            });
        }
        splits.insert(split.to_string(), samples);
    }
    if splits.is_empty() {
        return Err(Error::Invalid(format!("{} has none of the train/val/test splits", root.display())));
    }
    Ok((task, vocab, splits))
}
