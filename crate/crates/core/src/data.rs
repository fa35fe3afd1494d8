//! Folder datasets, the deterministic train/test split, and the toy shape set.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use raeg_autograd::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{RaegError, Result};
use crate::imageio::{from_rgb8, read_rgb, write_png};

pub const LABELS_FILE: &str = "labels.json";
const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Train,
    Test,
}

/// Images in `[0, 1]` on the 8-bit grid, `[N, 3, S, S]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub paths: Vec<PathBuf>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.images.dim(2)
    }

    pub fn select(&self, idx: &[usize]) -> Split {
        Split {
            images: gather(&self.images, idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            paths: idx.iter().map(|&i| self.paths[i].clone()).collect(),
        }
    }

    /// The first `n` images (or all of them).
    pub fn head(&self, n: usize) -> Split {
        self.select(&(0..n.min(self.len())).collect::<Vec<_>>())
    }

    pub fn with_images(&self, images: Tensor<f32>) -> Result<Split> {
        if images.shape() != self.images.shape() {
            return Err(RaegError::shape(format!("replacement images {:?} vs {:?}", images.shape(), self.images.shape())));
        }
        Ok(Split { images, ..self.clone() })
    }

    /// Batches in a fixed order, or shuffled by `rng`.
    pub fn batches(&self, batch: usize, rng: Option<&mut ChaCha8Rng>) -> Vec<(Tensor<f32>, Vec<usize>)> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        if let Some(rng) = rng {
            order.shuffle(rng);
        }
        order
            .chunks(batch.max(1))
            .map(|idx| (gather(&self.images, idx), idx.iter().map(|&i| self.labels[i]).collect()))
            .collect()
    }
}

/// Rows `idx` of axis 0.
pub fn gather(t: &Tensor<f32>, idx: &[usize]) -> Tensor<f32> {
    let row: usize = t.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(idx.len() * row);
    for &i in idx {
        data.extend_from_slice(&t.data()[i * row..(i + 1) * row]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    Tensor::from_vec(shape, data).expect("gather shape")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub train: Split,
    pub test: Split,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn split(&self, kind: SplitKind) -> &Split {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Test => &self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelManifest {
    pub classes: Vec<String>,
}

pub fn write_labels(dir: &Path, classes: &[String]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(LABELS_FILE);
    let manifest = LabelManifest { classes: classes.to_vec() };
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(path)
}

pub fn read_labels(path: &Path) -> Result<LabelManifest> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// Errors if a recorded class mapping disagrees with the dataset's.
pub fn check_labels(manifest: &LabelManifest, classes: &[String]) -> Result<()> {
    if manifest.classes != classes {
        return Err(RaegError::Dataset(format!("class mapping {:?} does not match the dataset's {:?}", manifest.classes, classes)));
    }
    Ok(())
}

/// Sorted class directories and their sorted image files.
pub fn scan(root: &Path) -> Result<BTreeMap<String, Vec<PathBuf>>> {
    let entries = std::fs::read_dir(root).map_err(|e| RaegError::Dataset(format!("cannot read {}: {e}", root.display())))?;
    let mut classes = BTreeMap::new();
    for entry in entries {
        let entry = entry?;
        if !entry.file_type()?.is_dir() {
            continue;
        }
        let mut files: Vec<PathBuf> = std::fs::read_dir(entry.path())?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension().and_then(|e| e.to_str()).is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            })
            .collect();
        files.sort();
        classes.insert(entry.file_name().to_string_lossy().into_owned(), files);
    }
    if classes.len() < 2 {
        return Err(RaegError::Dataset(format!("{} has {} class directories; need at least 2", root.display(), classes.len())));
    }
    if let Some((name, files)) = classes.iter().find(|(_, f)| f.len() < 2) {
        return Err(RaegError::Dataset(format!("class `{name}` has {} images; need at least 2 to split", files.len())));
    }
    Ok(classes)
}

fn split_key(path: &Path, seed: u64) -> [u8; 32] {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    h.finalize().into()
}

/// Test file count for a class of `n` images at 9:1.
pub fn test_count(n: usize) -> usize {
    ((n as f64 / 10.0).round() as usize).clamp(1, n - 1)
}

/// Per-class split ordered by the seeded filename hash; returns (train, test) paths.
pub fn split_files(files: &[PathBuf], seed: u64) -> (Vec<PathBuf>, Vec<PathBuf>) {
    let mut keyed: Vec<([u8; 32], &PathBuf)> = files.iter().map(|p| (split_key(p, seed), p)).collect();
    keyed.sort();
    let k = test_count(files.len());
    let mut test: Vec<PathBuf> = keyed[..k].iter().map(|p| p.1.clone()).collect();
    let mut train: Vec<PathBuf> = keyed[k..].iter().map(|p| p.1.clone()).collect();
    test.sort();
    train.sort();
    (train, test)
}

fn load_image(path: &Path, size: u32) -> Result<RgbImage> {
    let img = read_rgb(path)?;
    Ok(if img.dimensions() == (size, size) { img } else { imageops::resize(&img, size, size, FilterType::Triangle) })
}

fn load_split(items: &[(PathBuf, usize)], size: usize) -> Result<Split> {
    let mut images = Vec::with_capacity(items.len());
    let mut failures = Vec::new();
    for (p, _) in items {
        match load_image(p, size as u32) {
            Ok(img) => images.push(img),
            Err(e) => failures.push(format!("{}: {e}", p.display())),
        }
    }
    if !failures.is_empty() {
        return Err(RaegError::Dataset(format!("unreadable images:\n  {}", failures.join("\n  "))));
    }
    Ok(Split { images: from_rgb8(&images)?, labels: items.iter().map(|i| i.1).collect(), paths: items.iter().map(|i| i.0.clone()).collect() })
}

/// Decode a class-per-directory dataset, bilinearly resized to `size × size`.
pub fn load_dataset(root: &Path, size: usize, seed: u64) -> Result<Dataset> {
    if size == 0 {
        return Err(RaegError::config("data.image_size", "must be positive"));
    }
    let classes = scan(root)?;
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (label, files) in classes.values().enumerate() {
        let (tr, te) = split_files(files, seed);
        train.extend(tr.into_iter().map(|p| (p, label)));
        test.extend(te.into_iter().map(|p| (p, label)));
    }
    Ok(Dataset { classes: classes.into_keys().collect(), train: load_split(&train, size)?, test: load_split(&test, size)? })
}

fn cache_key(root: &Path, size: usize, seed: u64) -> Result<String> {
    let mut h = Sha256::new();
    h.update(std::fs::canonicalize(root)?.to_string_lossy().as_bytes());
    h.update(size.to_le_bytes());
    h.update(seed.to_le_bytes());
    for (class, files) in scan(root)? {
        h.update(class.as_bytes());
        for f in files {
            let meta = std::fs::metadata(&f)?;
            h.update(f.to_string_lossy().as_bytes());
            h.update(meta.len().to_le_bytes());
            if let Ok(t) = meta.modified().map(|t| t.duration_since(std::time::UNIX_EPOCH).unwrap_or_default()) {
                h.update(t.as_nanos().to_le_bytes());
            }
        }
    }
    Ok(h.finalize().iter().take(12).map(|b| format!("{b:02x}")).collect())
}

#[derive(Serialize, Deserialize)]
struct CachedSplit {
    labels: Vec<usize>,
    paths: Vec<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct CacheHeader {
    classes: Vec<String>,
    size: usize,
    train: CachedSplit,
    test: CachedSplit,
}

fn to_bytes(t: &Tensor<f32>) -> Vec<u8> {
    t.data().iter().map(|v| (v * 255.0).round() as u8).collect()
}

fn from_bytes(bytes: &[u8], n: usize, size: usize) -> Result<Tensor<f32>> {
    Ok(Tensor::from_vec(vec![n, 3, size, size], bytes.iter().map(|&b| b as f32 / 255.0).collect())?)
}

/// [`load_dataset`] through an on-disk cache of decoded pixels, keyed by the file list.
pub fn load_dataset_cached(root: &Path, size: usize, seed: u64, cache: Option<&Path>) -> Result<Dataset> {
    let Some(cache) = cache else { return load_dataset(root, size, seed) };
    let key = cache_key(root, size, seed)?;
    let (header_path, pixel_path) = (cache.join(format!("{key}.json")), cache.join(format!("{key}.u8")));
    if let (Ok(h), Ok(px)) = (std::fs::read_to_string(&header_path), std::fs::read(&pixel_path)) {
        let header: CacheHeader = serde_json::from_str(&h)?;
        let per = 3 * size * size;
        let nt = header.train.labels.len();
        if header.size == size && px.len() == (nt + header.test.labels.len()) * per {
            let split = |s: CachedSplit, bytes: &[u8]| -> Result<Split> {
                Ok(Split { images: from_bytes(bytes, s.labels.len(), size)?, labels: s.labels, paths: s.paths })
            };
            return Ok(Dataset {
                classes: header.classes,
                train: split(header.train, &px[..nt * per])?,
                test: split(header.test, &px[nt * per..])?,
            });
        }
    }
    let ds = load_dataset(root, size, seed)?;
    std::fs::create_dir_all(cache)?;
    let header = CacheHeader {
        classes: ds.classes.clone(),
        size,
        train: CachedSplit { labels: ds.train.labels.clone(), paths: ds.train.paths.clone() },
        test: CachedSplit { labels: ds.test.labels.clone(), paths: ds.test.paths.clone() },
    };
    let mut px = to_bytes(&ds.train.images);
    px.extend(to_bytes(&ds.test.images));
    std::fs::write(&pixel_path, px)?;
    std::fs::write(&header_path, serde_json::to_string(&header)?)?;
    Ok(ds)
}

/// The procedural shape classes, in label order.
pub const TOY_CLASSES: [&str; 10] = ["bars_diag", "bars_h", "bars_v", "checker", "cross", "disc", "ring", "saltire", "square", "triangle"];

fn shape_mask(class: usize, u: f64, v: f64, r: f64, freq: f64, angle: f64) -> bool {
    // u, v are centred coordinates; r the shape radius
    let (c, s) = (angle.cos(), angle.sin());
    let (ru, rv) = (c * u - s * v, s * u + c * v);
    match TOY_CLASSES[class] {
        "bars_diag" => ((u + v) * freq).rem_euclid(2.0) < 1.0,
        "bars_h" => (v * freq).rem_euclid(2.0) < 1.0,
        "bars_v" => (u * freq).rem_euclid(2.0) < 1.0,
        "checker" => (((u * freq).floor() + (v * freq).floor()) as i64).rem_euclid(2) == 0,
        "cross" => (ru.abs() < r * 0.3 && rv.abs() < r) || (rv.abs() < r * 0.3 && ru.abs() < r),
        "disc" => u * u + v * v < r * r,
        "ring" => {
            let d = (u * u + v * v).sqrt();
            d < r && d > r * 0.55
        }
        "saltire" => {
            let (a, b) = ((ru + rv) / 2f64.sqrt(), (ru - rv) / 2f64.sqrt());
            ((a.abs() < r * 0.22) || (b.abs() < r * 0.22)) && ru.abs() < r * 0.8 && rv.abs() < r * 0.8
        }
        "square" => ru.abs() < r * 0.8 && rv.abs() < r * 0.8,
        "triangle" => rv < r * 0.6 && rv > -r && ru.abs() < (r * 0.6 - rv) * 0.6,
        _ => unreachable!(),
    }
}

fn color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]
}

/// One toy image of `class`.
pub fn toy_image(class: usize, size: usize, rng: &mut ChaCha8Rng) -> RgbImage {
    let bg = color(rng);
    let mut fg = color(rng);
    // moderate contrast, so classifiers cannot rely on a huge input-space margin
    while !(0.3..0.8).contains(&(0..3).map(|i| (fg[i] - bg[i]).abs()).sum::<f64>()) {
        fg = color(rng);
    }
    let gradient = [rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15)];
    let n = size as f64;
    let r = n * rng.random_range(0.22..0.38);
    let (cx, cy) = (n * rng.random_range(0.35..0.65), n * rng.random_range(0.35..0.65));
    let freq = rng.random_range(3.0..6.0) / n * 2.0;
    let angle = rng.random_range(-0.35..0.35);
    let noise = rng.random_range(0.0..0.04);
    RgbImage::from_fn(size as u32, size as u32, |x, y| {
        // 2×2 supersampling for soft edges
        let mut cover = 0.0;
        for (dx, dy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
            if shape_mask(class, x as f64 + dx - cx, y as f64 + dy - cy, r, freq, angle) {
                cover += 0.25;
            }
        }
        let shade = gradient[0] * (x as f64 / n - 0.5) + gradient[1] * (y as f64 / n - 0.5);
        let mut px = [0u8; 3];
        for (i, p) in px.iter_mut().enumerate() {
            let v = bg[i] * (1.0 - cover) + fg[i] * cover + shade + noise * (rng.random::<f64>() - 0.5) * 2.0;
            *p = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
        Rgb(px)
    })
}

/// Write `per_class` PNGs for each toy class under `root/<class>/`.
pub fn generate_toy(root: &Path, per_class: usize, size: usize, seed: u64) -> Result<()> {
    if per_class < 2 {
        return Err(RaegError::config("per_class", "need at least 2 images per class"));
    }
    for (class, name) in TOY_CLASSES.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((class as u64 + 1) << 32));
        for i in 0..per_class {
            write_png(&toy_image(class, size, &mut rng), &root.join(name).join(format!("{i:05}.png")))?;
        }
    }
    Ok(())
}
