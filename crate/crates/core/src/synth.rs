//! Procedural leaf-like corpora so that every experiment runs without the
//! proprietary field images.
//!
//! Leaves are anti-aliased lobed ellipses with veins and low-frequency
//! texture on a textured background. Disease classes differ by their lesion
//! pattern, several of which live at scales that 1/4 downsampling destroys.
//! The `environment` changes background, lighting and leaf tint; train/val
//! and test splits of the classification corpus use disjoint environments.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{stream_rng, DatasetManifest, ManifestEntry, Split};
use crate::error::{Error, Result};
use crate::image::Image;

/// Class rows of the field dataset (train, val, test).
pub const FIELD_CLASSES: [&str; 5] = ["Healthy", "Brown spot", "CCYV", "MYSV", "Downy mildew"];
pub const FIELD_TRAIN_COUNTS: [usize; 5] = [13089, 5142, 4356, 10451, 2514];
pub const FIELD_VAL_COUNTS: [usize; 5] = [4394, 1668, 1438, 3512, 893];
pub const FIELD_TEST_COUNTS: [usize; 5] = [1276, 2786, 2096, 1550, 2219];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Lesion {
    Healthy,
    BrownSpot,
    Chlorotic,
    YellowSpeck,
    Angular,
}

impl Lesion {
    pub const ALL: [Lesion; 5] = [Lesion::Healthy, Lesion::BrownSpot, Lesion::Chlorotic, Lesion::YellowSpeck, Lesion::Angular];

    pub fn class_index(self) -> usize {
        Self::ALL.iter().position(|&l| l == self).unwrap()
    }
}

/// Capture conditions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Environment {
    background: [f64; 3],
    gain: f64,
    cast: [f64; 3],
    leaf: [f64; 3],
}

impl Environment {
    pub fn preset(index: usize) -> Self {
        match index % 3 {
            0 => Self { background: [0.42, 0.36, 0.30], gain: 1.0, cast: [0.0, 0.0, 0.0], leaf: [0.24, 0.50, 0.18] },
            1 => Self { background: [0.33, 0.31, 0.26], gain: 0.95, cast: [-0.01, 0.01, 0.02], leaf: [0.22, 0.47, 0.20] },
            _ => Self { background: [0.20, 0.24, 0.20], gain: 1.08, cast: [0.03, 0.02, -0.02], leaf: [0.28, 0.54, 0.16] },
        }
    }
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn coverage(signed_dist: f64) -> f64 {
    (0.5 - signed_dist).clamp(0.0, 1.0)
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let (wx, wy) = (p.0 - a.0, p.1 - a.1);
    let t = ((wx * vx + wy * vy) / (vx * vx + vy * vy)).clamp(0.0, 1.0);
    ((wx - t * vx).powi(2) + (wy - t * vy).powi(2)).sqrt()
}

/// Sum of a few random plane waves, for smooth texture.
struct Waves {
    waves: Vec<(f64, f64, f64, f64)>,
}

impl Waves {
    fn new<R: Rng>(rng: &mut R, count: usize, max_freq: f64, amp: f64) -> Self {
        let waves = (0..count)
            .map(|_| {
                let th = rng.random_range(0.0..PI);
                let f = rng.random_range(0.3 * max_freq..max_freq);
                (f * th.cos(), f * th.sin(), rng.random_range(0.0..2.0 * PI), amp / count as f64)
            })
            .collect();
        Self { waves }
    }

    fn at(&self, y: f64, x: f64) -> f64 {
        self.waves.iter().map(|&(fy, fx, ph, a)| a * (fy * y + fx * x + ph).sin()).sum()
    }
}

enum Mark {
    /// Round spot with darker rim.
    Spot { c: (f64, f64), r: f64 },
    /// Soft yellowing patch.
    Patch { c: (f64, f64), sigma: f64, strength: f64 },
    /// Tiny bright speck.
    Speck { c: (f64, f64), r: f64 },
    /// Rotated square lesion with hard edges.
    Angular { c: (f64, f64), half: f64, angle: f64 },
}

/// Render one `size x size` leaf image.
pub fn render_leaf<R: Rng>(rng: &mut R, size: usize, env: &Environment, lesion: Lesion) -> Image {
    let s = size as f64;
    let unit = s / 64.0;
    let cy = s * rng.random_range(0.45..0.55);
    let cx = s * rng.random_range(0.45..0.55);
    let angle = rng.random_range(0.0..PI);
    let semi_a = s * rng.random_range(0.36..0.46);
    let semi_b = s * rng.random_range(0.26..0.34);
    let lobe_phase = rng.random_range(0.0..2.0 * PI);
    let (ca, sa) = (angle.cos(), angle.sin());
    let to_leaf = |y: f64, x: f64| {
        let (dy, dx) = (y - cy, x - cx);
        (dx * ca + dy * sa, -dx * sa + dy * ca)
    };
    let from_leaf = |u: f64, v: f64| (cy + u * sa + v * ca, cx + u * ca - v * sa);

    // Veins: midrib along the major axis plus side veins.
    let mut veins = vec![(from_leaf(-0.9 * semi_a, 0.0), from_leaf(0.9 * semi_a, 0.0))];
    let pairs = rng.random_range(3..6);
    for k in 0..pairs {
        let u = semi_a * (-0.6 + 1.2 * (k as f64 + 0.5) / pairs as f64);
        for side in [-1.0, 1.0] {
            let end = from_leaf(u + 0.35 * semi_b, side * 0.75 * semi_b);
            veins.push((from_leaf(u, 0.0), end));
        }
    }
    let vein_width = 0.45 * unit;

    let bg_waves = Waves::new(rng, 4, 0.25 / unit, 0.08);
    let leaf_waves = Waves::new(rng, 4, 0.15 / unit, 0.06);

    let mut marks = Vec::new();
    let inside_point = |rng: &mut R, margin: f64| loop {
        let u = rng.random_range(-1.0..1.0);
        let v = rng.random_range(-1.0..1.0);
        if u * u + v * v < (1.0 - margin).powi(2) {
            return from_leaf(u * semi_a, v * semi_b);
        }
    };
    match lesion {
        Lesion::Healthy => {}
        Lesion::BrownSpot => {
            for _ in 0..rng.random_range(4..8) {
                let c = inside_point(rng, 0.15);
                marks.push(Mark::Spot { c, r: unit * rng.random_range(2.0..3.2) });
            }
        }
        Lesion::Chlorotic => {
            for _ in 0..rng.random_range(2..4) {
                let c = inside_point(rng, 0.3);
                marks.push(Mark::Patch { c, sigma: unit * rng.random_range(6.0..9.0), strength: rng.random_range(0.45..0.7) });
            }
        }
        Lesion::YellowSpeck => {
            for _ in 0..rng.random_range(18..30) {
                let c = inside_point(rng, 0.08);
                marks.push(Mark::Speck { c, r: unit * rng.random_range(0.7..1.1) });
            }
        }
        Lesion::Angular => {
            for _ in 0..rng.random_range(3..6) {
                let c = inside_point(rng, 0.2);
                marks.push(Mark::Angular { c, half: unit * rng.random_range(2.5..4.0), angle: rng.random_range(0.0..PI / 2.0) });
            }
        }
    }

    let noise = Normal::new(0.0, 0.01).expect("valid sigma");
    let yellow = [0.78, 0.74, 0.22];
    let brown = [0.42, 0.26, 0.12];
    let rim = [0.22, 0.14, 0.07];
    let vein_color = mix(env.leaf, [0.55, 0.78, 0.45], 0.6);
    let mut data = Vec::with_capacity(size * size * 3);
    for yi in 0..size {
        for xi in 0..size {
            let (y, x) = (yi as f64 + 0.5, xi as f64 + 0.5);
            let bg_t = bg_waves.at(y, x);
            let mut color = [env.background[0] + bg_t, env.background[1] + bg_t, env.background[2] + 0.8 * bg_t];

            let (u, v) = to_leaf(y, x);
            let phi = v.atan2(u);
            let rho = ((u / semi_a).powi(2) + (v / semi_b).powi(2)).sqrt();
            let boundary = 1.0 + 0.06 * (3.0 * phi + lobe_phase).sin();
            let leaf_cov = coverage((rho - boundary) * semi_b);
            if leaf_cov > 0.0 {
                let t = leaf_waves.at(y, x);
                let mut leaf = [env.leaf[0] + t * 0.5, env.leaf[1] + t, env.leaf[2] + t * 0.4];
                let vd = veins.iter().map(|&(a, b)| segment_distance((y, x), a, b)).fold(f64::INFINITY, f64::min);
                leaf = mix(leaf, vein_color, coverage(vd - vein_width));
                for mark in &marks {
                    match *mark {
                        Mark::Spot { c, r } => {
                            let d = ((y - c.0).powi(2) + (x - c.1).powi(2)).sqrt();
                            leaf = mix(leaf, rim, coverage(d - r));
                            leaf = mix(leaf, brown, coverage(d - 0.6 * r));
                        }
                        Mark::Patch { c, sigma, strength } => {
                            let d2 = (y - c.0).powi(2) + (x - c.1).powi(2);
                            leaf = mix(leaf, yellow, strength * (-d2 / (2.0 * sigma * sigma)).exp());
                        }
                        Mark::Speck { c, r } => {
                            let d = ((y - c.0).powi(2) + (x - c.1).powi(2)).sqrt();
                            leaf = mix(leaf, yellow, 0.9 * coverage(d - r));
                        }
                        Mark::Angular { c, half, angle } => {
                            let (dy, dx) = (y - c.0, x - c.1);
                            let (p, q) = (dx * angle.cos() + dy * angle.sin(), -dx * angle.sin() + dy * angle.cos());
                            let d = p.abs().max(q.abs()) - half;
                            leaf = mix(leaf, mix(yellow, brown, 0.35), 0.85 * coverage(d));
                        }
                    }
                }
                color = mix(color, leaf, leaf_cov);
            }
            for c in 0..3 {
                let v = color[c] * env.gain + env.cast[c] + noise.sample(rng);
                data.push(v.clamp(0.0, 1.0));
            }
        }
    }
    Image::new(size, size, 3, data)
}

/// Add a rubber-stamp-like artifact: a bright textured disk with soft edge.
pub fn inject_stamp(img: &mut Image, center: (usize, usize), radius: f64, amplitude: f64) {
    let (h, w, c) = img.dims();
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - center.0 as f64, x as f64 - center.1 as f64);
            let d = (dy * dy + dx * dx).sqrt();
            let envelope = (-(d / radius).powi(4)).exp();
            if envelope < 1e-4 {
                continue;
            }
            let pattern = 0.75 + 0.25 * ((dx * 1.7).sin() * (dy * 1.7).cos());
            for ch in 0..c {
                let v = img.get(y, x, ch) + amplitude * envelope * pattern;
                img.set(y, x, ch, v.clamp(0.0, 1.0));
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "profile", rename_all = "lowercase")]
pub enum SynthProfile {
    /// Unlabeled corpus for SR training (train + test splits).
    Sr { n_images: usize, image_size: usize, test_fraction: f64 },
    /// Five labeled classes with field-dataset-shaped counts divided by `divisor`.
    Classify { divisor: f64, image_size: usize },
}

/// Field-dataset counts scaled by `1 / divisor`, rounded, at least one per class.
pub fn scaled_counts(counts: &[usize; 5], divisor: f64) -> [usize; 5] {
    counts.map(|c| ((c as f64 / divisor).round() as usize).max(1))
}

/// Render a corpus into `out_dir` and write `out_dir/manifest.json`.
pub fn generate_corpus(out_dir: &Path, profile: &SynthProfile, seed: u64) -> Result<DatasetManifest> {
    let images_dir = out_dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let mut entries = Vec::new();
    let (image_size, classes) = match *profile {
        SynthProfile::Sr { n_images, image_size, test_fraction } => {
            if !(0.0..1.0).contains(&test_fraction) {
                return Err(Error::InvalidConfig(format!("test_fraction must lie in [0, 1), got {test_fraction}")));
            }
            let n_test = (n_images as f64 * test_fraction).round() as usize;
            for i in 0..n_images {
                let mut rng = stream_rng(seed, &[10, i as u64]);
                let lesion = Lesion::ALL[rng.random_range(0..Lesion::ALL.len())];
                let env = Environment::preset(rng.random_range(0..3));
                let img = render_leaf(&mut rng, image_size, &env, lesion);
                let rel = format!("images/{i:05}.png");
                img.save_png(out_dir.join(&rel))?;
                let split = if i >= n_images - n_test { Split::Test } else { Split::Train };
                entries.push(ManifestEntry { path: rel, split, label: None });
            }
            (image_size, Vec::new())
        }
        SynthProfile::Classify { divisor, image_size } => {
            if !(divisor > 0.0) {
                return Err(Error::InvalidConfig(format!("divisor must be positive, got {divisor}")));
            }
            for (split, table) in
                [(Split::Train, &FIELD_TRAIN_COUNTS), (Split::Val, &FIELD_VAL_COUNTS), (Split::Test, &FIELD_TEST_COUNTS)]
            {
                for (class, &count) in scaled_counts(table, divisor).iter().enumerate() {
                    for i in 0..count {
                        let mut rng = stream_rng(seed, &[20, split as u64, class as u64, i as u64]);
                        // Presets 0 and 2 for train/val, the unseen preset 1 for test.
                        let env = Environment::preset(if split == Split::Test { 1 } else { 2 * rng.random_range(0..2) });
                        let img = render_leaf(&mut rng, image_size, &env, Lesion::ALL[class]);
                        let rel = format!("images/{}_{class}_{i:05}.png", split.as_str());
                        img.save_png(out_dir.join(&rel))?;
                        entries.push(ManifestEntry { path: rel, split, label: Some(FIELD_CLASSES[class].to_string()) });
                    }
                }
            }
            (image_size, FIELD_CLASSES.iter().map(|s| s.to_string()).collect())
        }
    };
    let manifest = DatasetManifest::new(out_dir, image_size, classes, entries);
    manifest.save(out_dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rendering_is_seeded_and_in_range() {
        let env = Environment::preset(0);
        let a = render_leaf(&mut stream_rng(3, &[]), 48, &env, Lesion::YellowSpeck);
        let b = render_leaf(&mut stream_rng(3, &[]), 48, &env, Lesion::YellowSpeck);
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let c = render_leaf(&mut stream_rng(4, &[]), 48, &env, Lesion::YellowSpeck);
        assert_ne!(a, c);
    }

    #[test]
    fn scaled_table_counts() {
        assert_eq!(scaled_counts(&FIELD_TRAIN_COUNTS, 100.0), [131, 51, 44, 105, 25]);
        assert_eq!(scaled_counts(&FIELD_TRAIN_COUNTS, 1e9), [1; 5]);
    }

    #[test]
    fn stamp_raises_intensity_locally() {
        let mut img = Image::filled(32, 32, 3, 0.2);
        inject_stamp(&mut img, (16, 16), 4.0, 0.5);
        assert!(img.get(16, 16, 0) > 0.5);
        assert_eq!(img.get(0, 0, 0), 0.2);
    }
}
