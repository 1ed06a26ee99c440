//! Dataset manifests and the SR patch pipeline: random HR crops, bicubic
//! 1/4 downsampling and joint flip/rot90 augmentation.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arm::reflect;
use crate::error::{Error, Result};
use crate::image::Image;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: String,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

/// On-disk manifest document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestDoc {
    version: u32,
    image_size: usize,
    #[serde(default)]
    classes: Vec<String>,
    entries: Vec<ManifestEntry>,
}

/// Validated manifest; entry paths are relative to `root`.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub image_size: usize,
    pub classes: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, image_size: usize, classes: Vec<String>, mut entries: Vec<ManifestEntry>) -> Self {
        entries.sort_by(|a, b| a.path.cmp(&b.path));
        Self { root: root.into(), image_size, classes, entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == label)
    }

    /// `split -> class -> count`; unlabeled entries are counted under `""`.
    pub fn summary(&self) -> BTreeMap<String, BTreeMap<String, usize>> {
        let mut out: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
        for e in &self.entries {
            *out.entry(e.split.as_str().to_string())
                .or_default()
                .entry(e.label.clone().unwrap_or_default())
                .or_default() += 1;
        }
        out
    }

    /// Per-class counts of one split, in class order.
    pub fn class_counts(&self, split: Split) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for e in self.split(split) {
            if let Some(i) = e.label.as_deref().and_then(|l| self.class_index(l)) {
                counts[i] += 1;
            }
        }
        counts
    }

    pub fn load_images(&self, split: Split) -> Result<Vec<Image>> {
        self.split(split).map(|e| Image::load_png(self.resolve(e))).collect()
    }

    /// Images and class indices of one split.
    pub fn load_labeled(&self, split: Split) -> Result<(Vec<Image>, Vec<usize>)> {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for e in self.split(split) {
            let label = e
                .label
                .as_deref()
                .and_then(|l| self.class_index(l))
                .ok_or_else(|| Error::InvalidInput(format!("entry {} has no known label", e.path)))?;
            images.push(Image::load_png(self.resolve(e))?);
            labels.push(label);
        }
        Ok((images, labels))
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = ManifestDoc {
            version: MANIFEST_VERSION,
            image_size: self.image_size,
            classes: self.classes.clone(),
            entries: self.entries.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)? + "\n")
    }

    /// Write the manifest document to `path` (entries stay relative to `root`).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

/// Parse and validate a manifest; paths resolve against its directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: ManifestDoc = serde_json::from_str(&text).map_err(|e| Error::Manifest {
        path: path.to_path_buf(),
        problems: vec![format!("malformed manifest: {e}")],
    })?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut problems = Vec::new();
    if doc.version != MANIFEST_VERSION {
        problems.push(format!("unsupported version {} (expected {MANIFEST_VERSION})", doc.version));
    }
    let classes: BTreeSet<&str> = doc.classes.iter().map(String::as_str).collect();
    if classes.len() != doc.classes.len() {
        problems.push("duplicate class names".to_string());
    }
    let mut seen = BTreeSet::new();
    for e in &doc.entries {
        if !seen.insert(e.path.as_str()) {
            problems.push(format!("duplicate path: {}", e.path));
            continue;
        }
        if let Some(label) = &e.label {
            if !classes.contains(label.as_str()) {
                problems.push(format!("unknown label {label:?} for {}", e.path));
            }
        }
        let full = root.join(&e.path);
        if !full.is_file() {
            problems.push(format!("missing file: {}", full.display()));
            continue;
        }
        match image::image_dimensions(&full) {
            Ok((w, h)) if w as usize == doc.image_size && h as usize == doc.image_size => {}
            Ok((w, h)) => problems.push(format!(
                "{}: size {w}x{h} differs from declared image_size {}",
                e.path, doc.image_size
            )),
            Err(err) => problems.push(format!("undecodable image {}: {err}", full.display())),
        }
    }
    if !problems.is_empty() {
        return Err(Error::Manifest { path: path.to_path_buf(), problems });
    }
    Ok(DatasetManifest::new(root, doc.image_size, doc.classes, doc.entries))
}

/// Deterministic generator for a named stream under `seed`.
pub fn stream_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for &t in tags {
        h = splitmix(h ^ t.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    }
    ChaCha8Rng::seed_from_u64(splitmix(h))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Uniformly placed `n x n` crop.
pub fn sample_hr_patch<R: Rng + ?Sized>(img: &Image, n: usize, rng: &mut R) -> Result<Image> {
    if img.height() < n || img.width() < n {
        return Err(Error::InvalidInput(format!(
            "image {}x{} is smaller than the {n}x{n} patch",
            img.height(),
            img.width()
        )));
    }
    let top = rng.random_range(0..=img.height() - n);
    let left = rng.random_range(0..=img.width() - n);
    img.crop(top, left, n, n)
}

/// Catmull-Rom cubic (a = -0.5).
pub fn cubic_weight(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Taps `(offset from first source index, weight)` for one output sample.
struct Taps {
    start: isize,
    weights: Vec<f64>,
}

/// Resampling taps mapping `n_in` samples to `n_out` with pixel-center
/// alignment; the kernel is widened by the scale when shrinking.
fn resample_taps(n_in: usize, n_out: usize) -> Vec<Taps> {
    let scale = n_out as f64 / n_in as f64;
    let stretch = if scale < 1.0 { 1.0 / scale } else { 1.0 };
    let support = 2.0 * stretch;
    (0..n_out)
        .map(|i| {
            let center = (i as f64 + 0.5) / scale - 0.5;
            let start = (center - support).floor() as isize + 1;
            let end = (center + support).ceil() as isize - 1;
            let mut weights: Vec<f64> = (start..=end).map(|j| cubic_weight((j as f64 - center) / stretch)).collect();
            let s: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|w| *w /= s);
            Taps { start, weights }
        })
        .collect()
}

fn resample(img: &Image, out_h: usize, out_w: usize) -> Image {
    let (h, w, c) = img.dims();
    let col_taps = resample_taps(w, out_w);
    let mut tmp = vec![0.0; h * out_w * c];
    for y in 0..h {
        for (x, t) in col_taps.iter().enumerate() {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, wgt) in t.weights.iter().enumerate() {
                    acc += wgt * img.get(y, reflect(t.start + k as isize, w), ch);
                }
                tmp[(y * out_w + x) * c + ch] = acc;
            }
        }
    }
    let row_taps = resample_taps(h, out_h);
    let mut out = vec![0.0; out_h * out_w * c];
    for (y, t) in row_taps.iter().enumerate() {
        for x in 0..out_w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, wgt) in t.weights.iter().enumerate() {
                    acc += wgt * tmp[(reflect(t.start + k as isize, h) * out_w + x) * c + ch];
                }
                out[(y * out_w + x) * c + ch] = acc.clamp(0.0, 1.0);
            }
        }
    }
    Image::new(out_h, out_w, c, out)
}

/// Antialiased bicubic shrink by an integer factor, clipped to [0, 1].
pub fn downsample_bicubic(img: &Image, factor: usize) -> Result<Image> {
    if factor == 0 || img.height() % factor != 0 || img.width() % factor != 0 {
        return Err(Error::InvalidInput(format!(
            "image {}x{} is not divisible by factor {factor}",
            img.height(),
            img.width()
        )));
    }
    Ok(resample(img, img.height() / factor, img.width() / factor))
}

/// Bicubic enlargement by an integer factor, clipped to [0, 1].
pub fn upsample_bicubic(img: &Image, factor: usize) -> Image {
    resample(img, img.height() * factor, img.width() * factor)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SrPair {
    pub hr: Image,
    pub lr: Image,
}

impl SrPair {
    /// Build a pair by downsampling `hr` by 4.
    pub fn from_hr(hr: Image) -> Result<Self> {
        let lr = downsample_bicubic(&hr, 4)?;
        Ok(Self { hr, lr })
    }
}

/// Rigid transform: optional horizontal flip followed by `rot90` quarter
/// turns counter-clockwise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct Transform {
    pub flip: bool,
    pub rot90: u8,
}

impl Transform {
    pub const ALL: [Transform; 8] = [
        Transform { flip: false, rot90: 0 },
        Transform { flip: false, rot90: 1 },
        Transform { flip: false, rot90: 2 },
        Transform { flip: false, rot90: 3 },
        Transform { flip: true, rot90: 0 },
        Transform { flip: true, rot90: 1 },
        Transform { flip: true, rot90: 2 },
        Transform { flip: true, rot90: 3 },
    ];

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let flip = rng.random_bool(0.5);
        let rot90 = rng.random_range(0..4u8);
        Self { flip, rot90 }
    }

    pub fn apply(&self, img: &Image) -> Image {
        let img = if self.flip { img.flip_horizontal() } else { img.clone() };
        img.rot90_times(self.rot90 as usize)
    }

    pub fn index(&self) -> usize {
        (self.flip as usize) * 4 + self.rot90 as usize
    }
}

/// The same random transform applied to both halves of the pair.
pub fn augment<R: Rng + ?Sized>(pair: &SrPair, rng: &mut R) -> (SrPair, Transform) {
    let t = Transform::random(rng);
    (SrPair { hr: t.apply(&pair.hr), lr: t.apply(&pair.lr) }, t)
}

/// Shuffled, drop-last mini-batches of augmented patches over an in-memory
/// HR image set. Every batch is addressable by `(epoch, index)`, so
/// iteration can resume at any step.
pub struct BatchIterator<'a> {
    images: &'a [Image],
    batch_size: usize,
    patch_size: usize,
    seed: u64,
    augment: bool,
    next_step: u64,
}

impl<'a> BatchIterator<'a> {
    pub fn new(images: &'a [Image], batch_size: usize, patch_size: usize, seed: u64) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::InvalidInput("batch iterator needs at least one image".into()));
        }
        if batch_size == 0 || patch_size == 0 || patch_size % 4 != 0 {
            return Err(Error::InvalidConfig(format!(
                "batch_size must be positive and patch_size a positive multiple of 4 (got {batch_size}, {patch_size})"
            )));
        }
        if images.len() < batch_size {
            return Err(Error::InvalidInput(format!(
                "{} images cannot fill one batch of {batch_size}",
                images.len()
            )));
        }
        Ok(Self { images, batch_size, patch_size, seed, augment: true, next_step: 0 })
    }

    pub fn with_augmentation(mut self, on: bool) -> Self {
        self.augment = on;
        self
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.images.len() / self.batch_size
    }

    /// Position the stream so the next batch is global step `step`.
    pub fn seek(&mut self, step: u64) {
        self.next_step = step;
    }

    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.images.len()).collect();
        order.shuffle(&mut stream_rng(self.seed, &[1, epoch]));
        order
    }

    /// Image indices of batch `index` in `epoch`.
    pub fn batch_indices(&self, epoch: u64, index: usize) -> Vec<usize> {
        let order = self.epoch_order(epoch);
        order[index * self.batch_size..(index + 1) * self.batch_size].to_vec()
    }

    pub fn batch_at(&self, step: u64) -> Result<(u64, Vec<SrPair>)> {
        let per = self.batches_per_epoch() as u64;
        let (epoch, index) = (step / per, (step % per) as usize);
        let mut pairs = Vec::with_capacity(self.batch_size);
        for (slot, &i) in self.batch_indices(epoch, index).iter().enumerate() {
            let mut rng = stream_rng(self.seed, &[2, step, slot as u64]);
            let mut hr = sample_hr_patch(&self.images[i], self.patch_size, &mut rng)?;
            if self.augment {
                hr = Transform::random(&mut rng).apply(&hr);
            }
            pairs.push(SrPair::from_hr(hr)?);
        }
        Ok((epoch, pairs))
    }
}

impl Iterator for BatchIterator<'_> {
    type Item = Result<(u64, Vec<SrPair>)>;

    fn next(&mut self) -> Option<Self::Item> {
        let out = self.batch_at(self.next_step);
        self.next_step += 1;
        Some(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, 3, |y, x, c| {
            (0.5 + 0.4 * ((y as f64 * 0.37 + c as f64).sin() * (x as f64 * 0.23).cos())).clamp(0.0, 1.0)
        })
    }

    #[test]
    fn cubic_kernel_is_interpolating() {
        assert_eq!(cubic_weight(0.0), 1.0);
        assert!(cubic_weight(1.0).abs() < 1e-15 && cubic_weight(2.0) == 0.0);
        assert!(cubic_weight(1.5) < 0.0);
    }

    #[test]
    fn downsample_constant_and_shape() {
        let img = Image::filled(192, 192, 3, 0.42);
        let lr = downsample_bicubic(&img, 4).unwrap();
        assert_eq!(lr.dims(), (48, 48, 3));
        assert!(lr.data().iter().all(|v| (v - 0.42).abs() < 1e-12));
        assert!(downsample_bicubic(&Image::filled(10, 12, 3, 0.0), 4).is_err());
    }

    #[test]
    fn downsample_reproduces_affine_ramp_in_interior() {
        let n = 64;
        let img = Image::from_fn(n, n, 1, |_, x, _| 0.1 + 0.8 * (x as f64 + 0.5) / n as f64);
        let lr = downsample_bicubic(&img, 4).unwrap();
        for y in 0..16 {
            for x in 2..14 {
                // LR pixel x covers HR pixels 4x..4x+3, center 4x + 1.5
                let want = 0.1 + 0.8 * (4.0 * x as f64 + 2.0) / n as f64;
                assert!((lr.get(y, x, 0) - want).abs() < 1e-12, "({y},{x})");
            }
        }
    }

    #[test]
    fn identity_crop_and_seeded_crop() {
        let img = textured(192, 192);
        let mut rng = stream_rng(1, &[]);
        assert_eq!(sample_hr_patch(&img, 192, &mut rng).unwrap(), img);
        let big = textured(316, 316);
        let a = sample_hr_patch(&big, 192, &mut stream_rng(9, &[3])).unwrap();
        let b = sample_hr_patch(&big, 192, &mut stream_rng(9, &[3])).unwrap();
        assert_eq!(a, b);
        assert!(sample_hr_patch(&img, 200, &mut rng).is_err());
    }

    #[test]
    fn crop_offsets_cover_full_range() {
        let mut rng = stream_rng(4, &[]);
        let (mut lo, mut hi) = (usize::MAX, 0);
        for _ in 0..4000 {
            let top = rng.random_range(0..=316 - 192usize);
            lo = lo.min(top);
            hi = hi.max(top);
        }
        assert_eq!((lo, hi), (0, 124));
    }

    #[test]
    fn augmentation_commutes_with_downsampling() {
        let hr = textured(32, 32);
        let pair = SrPair::from_hr(hr.clone()).unwrap();
        for t in Transform::ALL {
            let lr_t = t.apply(&pair.lr);
            let down = downsample_bicubic(&t.apply(&hr), 4).unwrap();
            for (a, b) in lr_t.data().iter().zip(down.data()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn identity_transform_leaves_pair_unchanged() {
        let pair = SrPair::from_hr(textured(16, 16)).unwrap();
        let t = Transform::default();
        assert_eq!(t.apply(&pair.hr), pair.hr);
        assert_eq!(t.apply(&pair.lr), pair.lr);
    }

    #[test]
    fn batches_drop_last_and_are_deterministic() {
        let imgs: Vec<Image> = (0..65).map(|i| Image::filled(8, 8, 3, i as f64 / 65.0)).collect();
        let it = BatchIterator::new(&imgs, 32, 8, 5).unwrap();
        assert_eq!(it.batches_per_epoch(), 2);
        let it64 = BatchIterator::new(&imgs[..64], 32, 8, 5).unwrap();
        assert_eq!(it64.batches_per_epoch(), 2);

        let a: Vec<_> = BatchIterator::new(&imgs, 32, 8, 5).unwrap().take(3).map(|b| b.unwrap()).collect();
        let b: Vec<_> = BatchIterator::new(&imgs, 32, 8, 5).unwrap().take(3).map(|b| b.unwrap()).collect();
        assert_eq!(a, b);
        assert_eq!(a[2].0, 1);

        // an epoch is a permutation, minus the dropped remainder
        let mut seen: Vec<usize> = (0..2).flat_map(|i| it.batch_indices(0, i)).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 64);
    }

    #[test]
    fn emitted_pairs_satisfy_downsample_relation_exactly() {
        let imgs = vec![textured(40, 40), textured(48, 44)];
        let it = BatchIterator::new(&imgs, 2, 16, 3).unwrap();
        for step in 0..4 {
            for p in it.batch_at(step).unwrap().1 {
                assert_eq!(downsample_bicubic(&p.hr, 4).unwrap(), p.lr);
            }
        }
    }
}
