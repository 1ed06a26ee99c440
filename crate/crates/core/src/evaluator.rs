//! Full-image super-resolution, FID, artifact auditing, PSNR and line
//! profiles.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::arm::{self, ArmConfig};
use crate::autograd::Graph;
use crate::data::{downsample_bicubic, upsample_bicubic};
use crate::error::{Error, Result};
use crate::image::{batch_to_images, images_to_batch, Image};
use crate::losses::FeatureExtractor;
use crate::networks::Generator;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TileConfig {
    /// Largest LR side processed in one pass.
    pub tile: usize,
    /// LR pixels shared by neighbouring tiles.
    pub overlap: usize,
}

impl Default for TileConfig {
    fn default() -> Self {
        Self { tile: 128, overlap: 16 }
    }
}

impl TileConfig {
    pub fn validate(&self) -> Result<()> {
        if self.overlap < 4 || self.tile < 2 * self.overlap {
            return Err(Error::InvalidConfig(format!(
                "tile ({}) must be at least twice the overlap ({}), and overlap at least 4",
                self.tile, self.overlap
            )));
        }
        Ok(())
    }
}

fn tile_starts(len: usize, tile: usize, overlap: usize) -> Vec<usize> {
    if len <= tile {
        return vec![0];
    }
    let stride = tile - overlap;
    let mut starts: Vec<usize> = (0..).map(|i| i * stride).take_while(|&s| s + tile < len).collect();
    starts.push(len - tile);
    starts.dedup();
    starts
}

/// Weight of an output pixel `d` HR pixels from an inner tile edge: zero
/// in the outer quarter of the overlap, then a linear ramp over its middle
/// half. Neighbouring ramps sum to one.
fn feather(d: f64, overlap_hr: f64) -> f64 {
    ((d + 0.5 - overlap_hr / 4.0) / (overlap_hr / 2.0)).clamp(0.0, 1.0)
}

fn run_generator(g: &Generator, lr: &Image) -> Result<Image> {
    let graph = Graph::new();
    let p = g.params().bind(&graph, false);
    let out = g.forward(&p, graph.constant(images_to_batch(std::slice::from_ref(lr))?))?;
    Ok(batch_to_images(&out.value()).remove(0))
}

/// 4× super-resolution of any 3-channel image, clamped to [0, 1]. Inputs
/// wider or taller than `tiles.tile` are processed in feather-blended tiles.
pub fn super_resolve(g: &Generator, lr: &Image, tiles: &TileConfig) -> Result<Image> {
    tiles.validate()?;
    if lr.channels() != 3 {
        return Err(Error::ShapeMismatch(format!("super_resolve expects 3 channels, got {}", lr.channels())));
    }
    let (h, w) = (lr.height(), lr.width());
    let s = g.config().upscale_factor;
    if h <= tiles.tile && w <= tiles.tile {
        return Ok(run_generator(g, lr)?.clamp01());
    }
    let ys = tile_starts(h, tiles.tile, tiles.overlap);
    let xs = tile_starts(w, tiles.tile, tiles.overlap);
    let (oh, ow) = (h * s, w * s);
    let mut acc = vec![0.0; oh * ow * 3];
    let mut wsum = vec![0.0; oh * ow];
    let ov = (tiles.overlap * s) as f64;
    for &ty in &ys {
        for &tx in &xs {
            let th = tiles.tile.min(h);
            let tw = tiles.tile.min(w);
            let out = run_generator(g, &lr.crop(ty, tx, th, tw)?)?;
            let (top, left) = (ty * s, tx * s);
            for y in 0..th * s {
                let a = if ty > 0 { feather(y as f64, ov) } else { 1.0 };
                let b = if ty + th < h { feather((th * s - 1 - y) as f64, ov) } else { 1.0 };
                let wy = a.min(b);
                if wy == 0.0 {
                    continue;
                }
                for x in 0..tw * s {
                    let a = if tx > 0 { feather(x as f64, ov) } else { 1.0 };
                    let b = if tx + tw < w { feather((tw * s - 1 - x) as f64, ov) } else { 1.0 };
                    let wt = wy * a.min(b);
                    if wt == 0.0 {
                        continue;
                    }
                    let o = (top + y) * ow + left + x;
                    wsum[o] += wt;
                    for c in 0..3 {
                        acc[o * 3 + c] += wt * out.get(y, x, c);
                    }
                }
            }
        }
    }
    for (o, &ws) in wsum.iter().enumerate() {
        for c in 0..3 {
            acc[o * 3 + c] /= ws;
        }
    }
    Ok(Image::new(oh, ow, 3, acc).clamp01())
}

/// Bicubic 4× baseline from an HR image: down then up.
pub fn bicubic_baseline(hr: &Image) -> Result<Image> {
    Ok(upsample_bicubic(&downsample_bicubic(hr, 4)?, 4).clamp01())
}

/// Peak signal-to-noise ratio for [0, 1] images; identical inputs give
/// `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch(format!("psnr: {:?} vs {:?}", a.dims(), b.dims())));
    }
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// One feature vector per image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSet {
    pub descriptor: String,
    pub rows: Vec<Vec<f64>>,
}

impl EmbeddingSet {
    pub fn new(descriptor: impl Into<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::ShapeMismatch("embedding rows differ in length".into()));
        }
        Ok(Self { descriptor: descriptor.into(), rows })
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    fn stats(&self) -> (DVector<f64>, DMatrix<f64>) {
        let (n, d) = (self.rows.len(), self.dim());
        let x = DMatrix::from_fn(n, d, |i, j| self.rows[i][j]);
        let mu = DVector::from_fn(d, |j, _| x.column(j).mean());
        let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mu[j]);
        let cov = centered.transpose() * &centered / (n as f64 - 1.0);
        (mu, cov)
    }
}

/// Per-channel mean and standard deviation of the extractor's feature maps.
pub fn embed(images: &[Image], fx: &dyn FeatureExtractor) -> Result<EmbeddingSet> {
    let mut rows = Vec::with_capacity(images.len());
    for img in images {
        let graph = Graph::new();
        let f = fx.features(graph.constant(images_to_batch(std::slice::from_ref(img))?))?;
        let f = f.value();
        let (_, c, h, w) = f.dims4();
        let hw = (h * w) as f64;
        let mut row = Vec::with_capacity(2 * c);
        for ch in 0..c {
            let plane = &f.data()[ch * h * w..(ch + 1) * h * w];
            let mean = plane.iter().sum::<f64>() / hw;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw;
            row.push(mean);
            row.push(var.sqrt());
        }
        rows.push(row);
    }
    EmbeddingSet::new(fx.descriptor(), rows)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between the Gaussian fits of two embedding sets.
/// The trace term uses `Tr sqrt(A^½ B A^½)`, which shares its spectrum with
/// `A B`; eigenvalues below zero from round-off are clamped to zero.
pub fn fid(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<f64> {
    if a.rows.len() < 2 || b.rows.len() < 2 {
        return Err(Error::InvalidInput("fid needs at least two embeddings per set".into()));
    }
    if a.dim() != b.dim() || a.dim() == 0 {
        return Err(Error::ShapeMismatch(format!("fid: embedding dims {} vs {}", a.dim(), b.dim())));
    }
    let (mu_a, cov_a) = a.stats();
    let (mu_b, cov_b) = b.stats();
    let root_a = psd_sqrt(&cov_a);
    let inner = &root_a * &cov_b * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = inner.symmetric_eigenvalues().iter().map(|l| l.max(0.0).sqrt()).sum();
    let value = (mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    Ok(value.max(0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageAudit {
    pub path: String,
    pub blob_count: usize,
    pub arm_mass: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedPair {
    pub path: String,
    pub reason: String,
}

/// Evaluation outputs; absent metrics are omitted from the JSON.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fid: Option<f64>,
    /// `null` in JSON when every pair is identical (infinite PSNR).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr_db: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub artifact_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flagged: Option<usize>,
    pub per_image: Vec<ImageAudit>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub skipped: Vec<SkippedPair>,
    pub config: serde_json::Value,
}

impl MetricsReport {
    pub fn total_arm_mass(&self) -> f64 {
        self.per_image.iter().map(|a| a.arm_mass).sum()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

/// Flag every SR image whose residual against its HR reference contains at
/// least one surviving blob. Mismatched pairs are listed and skipped.
pub fn artifact_audit(pairs: &[(String, Image, Image)], cfg: &ArmConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let mut report = MetricsReport { config: serde_json::to_value(cfg)?, ..MetricsReport::default() };
    let mut flagged = 0;
    for (path, sr, hr) in pairs {
        let residual = match arm::subtract(sr, hr) {
            Ok(r) => r,
            Err(e) => {
                report.skipped.push(SkippedPair { path: path.clone(), reason: e.to_string() });
                continue;
            }
        };
        let residual = match cfg.source_size {
            Some(n) => arm::ResidualImage { source_size: n, ..residual },
            None => residual,
        };
        let blobs = arm::detect_blobs(&residual, cfg)?;
        if !blobs.is_empty() {
            flagged += 1;
        }
        report.per_image.push(ImageAudit {
            path: path.clone(),
            blob_count: blobs.len(),
            arm_mass: blobs.iter().map(|b| b.mass).sum(),
        });
    }
    if !report.per_image.is_empty() {
        report.artifact_rate = Some(flagged as f64 / report.per_image.len() as f64);
        report.flagged = Some(flagged);
    }
    Ok(report)
}

/// Mean PSNR over pairs, skipping infinite values; `None` if all are.
pub fn mean_psnr(pairs: &[(Image, Image)]) -> Result<Option<f64>> {
    let mut vals = Vec::new();
    for (a, b) in pairs {
        let v = psnr(a, b)?;
        if v.is_finite() {
            vals.push(v);
        }
    }
    Ok((!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelPolicy {
    #[default]
    Mean,
    Red,
    Green,
    Blue,
}

/// Intensities along one row.
pub fn line_profile(img: &Image, row: usize, policy: ChannelPolicy) -> Result<Vec<f64>> {
    if row >= img.height() {
        return Err(Error::InvalidInput(format!("row {row} outside image of height {}", img.height())));
    }
    let channel = match policy {
        ChannelPolicy::Mean => None,
        ChannelPolicy::Red => Some(0),
        ChannelPolicy::Green => Some(1),
        ChannelPolicy::Blue => Some(2),
    };
    if let Some(c) = channel {
        if c >= img.channels() {
            return Err(Error::InvalidInput(format!("channel {c} missing from {}-channel image", img.channels())));
        }
    }
    Ok((0..img.width())
        .map(|x| match channel {
            Some(c) => img.get(row, x, c),
            None => img.channel_mean(row, x),
        })
        .collect())
}

/// Render curves (values in [0, 1]) as a line chart PNG.
pub fn plot_profiles(curves: &[(&str, &[f64])], path: impl AsRef<Path>) -> Result<()> {
    const PALETTE: [[u8; 3]; 4] = [[20, 20, 20], [214, 39, 40], [31, 119, 180], [44, 160, 44]];
    let (w, h, pad) = (640usize, 320usize, 24usize);
    let mut px = vec![255u8; w * h * 3];
    let mut put = |x: i64, y: i64, c: [u8; 3]| {
        if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
            let o = (y as usize * w + x as usize) * 3;
            px[o..o + 3].copy_from_slice(&c);
        }
    };
    for i in pad..w - pad {
        put(i as i64, (h - pad) as i64, [120; 3]);
    }
    for j in pad..h - pad {
        put(pad as i64, j as i64, [120; 3]);
    }
    for (k, (_, ys)) in curves.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let n = ys.len().max(2) - 1;
        let to_px = |i: usize, v: f64| {
            let x = pad as f64 + (w - 2 * pad) as f64 * i as f64 / n as f64;
            let y = (h - pad) as f64 - (h - 2 * pad) as f64 * v.clamp(0.0, 1.0);
            (x, y)
        };
        for i in 1..ys.len() {
            let (x0, y0) = to_px(i - 1, ys[i - 1]);
            let (x1, y1) = to_px(i, ys[i]);
            let steps = (x1 - x0).abs().max((y1 - y0).abs()).ceil().max(1.0) as usize;
            for s in 0..=steps {
                let t = s as f64 / steps as f64;
                put((x0 + t * (x1 - x0)).round() as i64, (y0 + t * (y1 - y0)).round() as i64, color);
            }
        }
    }
    let path = path.as_ref();
    image::RgbImage::from_raw(w as u32, h as u32, px)
        .expect("buffer matches dimensions")
        .save(path)
        .map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })
}

/// Render grouped values in [0, 1] as a bar chart PNG, one bar per entry.
pub fn plot_bars(values: &[f64], path: impl AsRef<Path>) -> Result<()> {
    let (w, h, pad) = (480usize, 320usize, 24usize);
    let mut px = vec![255u8; w * h * 3];
    let n = values.len().max(1);
    let slot = (w - 2 * pad) / n;
    for (k, v) in values.iter().enumerate() {
        let top = (h - pad) - ((h - 2 * pad) as f64 * v.clamp(0.0, 1.0)).round() as usize;
        let x0 = pad + k * slot + slot / 6;
        let x1 = pad + (k + 1) * slot - slot / 6;
        for y in top..h - pad {
            for x in x0..x1 {
                let o = (y * w + x) * 3;
                px[o..o + 3].copy_from_slice(&[31, 119, 180]);
            }
        }
    }
    for x in pad..w - pad {
        let o = ((h - pad) * w + x) * 3;
        px[o..o + 3].copy_from_slice(&[120; 3]);
    }
    let path = path.as_ref();
    image::RgbImage::from_raw(w as u32, h as u32, px)
        .expect("buffer matches dimensions")
        .save(path)
        .map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::GeneratorConfig;

    #[test]
    fn psnr_closed_form() {
        let a = Image::filled(4, 4, 3, 0.0);
        let b = Image::filled(4, 4, 3, 0.5);
        assert!((psnr(&a, &b).unwrap() - 20.0 * 2f64.log10()).abs() < 1e-12);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
    }

    #[test]
    fn tile_starts_cover_everything() {
        assert_eq!(tile_starts(48, 64, 16), vec![0]);
        assert_eq!(tile_starts(100, 40, 16), vec![0, 24, 48, 60]);
    }

    #[test]
    fn tiled_matches_whole_image() {
        let g = Generator::new(GeneratorConfig::tiny(), 4).unwrap();
        let lr = Image::from_fn(48, 48, 3, |y, x, c| 0.5 + 0.3 * ((y as f64 * 0.4).sin() * (x as f64 * 0.3 + c as f64).cos()));
        let whole = super_resolve(&g, &lr, &TileConfig { tile: 64, overlap: 16 }).unwrap();
        let tiled = super_resolve(&g, &lr, &TileConfig { tile: 32, overlap: 16 }).unwrap();
        let err = whole.data().iter().zip(tiled.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-3, "max diff {err}");
    }

    #[test]
    fn profile_of_step_edge() {
        let img = Image::from_fn(4, 10, 3, |_, x, _| if x >= 6 { 1.0 } else { 0.0 });
        let p = line_profile(&img, 2, ChannelPolicy::Mean).unwrap();
        assert_eq!(p, vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        assert!(line_profile(&img, 4, ChannelPolicy::Mean).is_err());
    }
}
