//! Artifact removal module.
//!
//! Artifacts ("rubber stamps") are found as blobs in the absolute SR/HR
//! residual: the residual is band-passed with a two-kernel difference of
//! Gaussians, local maxima above a response threshold become blob centers,
//! and every blob is a disk whose radius follows from the kernel scales.
//! The penalty is the sum, over blobs, of residual mass inside each disk.
//!
//! Detection is a non-differentiable selection step. During training the
//! blob geometry is computed from detached values and only the pixel values
//! inside the disks carry gradient.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::Tensor;

/// Kernel widths are given as fractions of the training crop side `N`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArmConfig {
    pub sigma1_ratio: f64,
    pub sigma2_ratio: f64,
    /// Minimum DoG response of a blob center (raw residual units).
    pub response_threshold: f64,
    /// Blobs with smaller residual mass are dropped.
    pub min_mass: f64,
    /// Side of the non-maximum-suppression window; odd, at least 3.
    pub nms_window: usize,
    /// Overrides `N` (otherwise the residual's own side is used). Needed when
    /// auditing full images with a detector tuned on smaller training crops.
    pub source_size: Option<usize>,
}

impl Default for ArmConfig {
    fn default() -> Self {
        Self {
            sigma1_ratio: 0.078,
            sigma2_ratio: 0.104,
            response_threshold: 0.02,
            min_mass: 0.0,
            nms_window: 3,
            source_size: None,
        }
    }
}

impl ArmConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.sigma1_ratio > 0.0 && self.sigma1_ratio < self.sigma2_ratio) {
            problems.push(format!(
                "need 0 < sigma1_ratio < sigma2_ratio, got {} and {}",
                self.sigma1_ratio, self.sigma2_ratio
            ));
        }
        if !(self.response_threshold >= 0.0) {
            problems.push(format!("response_threshold must be >= 0, got {}", self.response_threshold));
        }
        if !(self.min_mass >= 0.0) {
            problems.push(format!("min_mass must be >= 0, got {}", self.min_mass));
        }
        if self.nms_window < 3 || self.nms_window % 2 == 0 {
            problems.push(format!("nms_window must be odd and >= 3, got {}", self.nms_window));
        }
        if self.source_size == Some(0) {
            problems.push("source_size must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems.join("; ")))
        }
    }

    /// `(sigma1, sigma2)` in pixels for crop side `n`.
    pub fn sigmas(&self, n: usize) -> (f64, f64) {
        (self.sigma1_ratio * n as f64, self.sigma2_ratio * n as f64)
    }

    /// Single blob scale: geometric mean of the two kernel widths.
    pub fn blob_sigma(&self, n: usize) -> f64 {
        let (s1, s2) = self.sigmas(n);
        (s1 * s2).sqrt()
    }

    pub fn blob_radius(&self, n: usize) -> f64 {
        std::f64::consts::SQRT_2 * self.blob_sigma(n)
    }
}

/// Single-channel non-negative map of |HR − SR| (channel mean).
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
    /// Side `N` of the square crop the pair came from.
    pub source_size: usize,
}

impl ResidualImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>, source_size: usize) -> Self {
        assert_eq!(data.len(), height * width);
        Self { height, width, data, source_size }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for r in 0..self.height {
            data.extend(self.data[r * self.width..(r + 1) * self.width].iter().rev());
        }
        Self { data, ..*self }
    }
}

/// Response map of [`dog_response`], same layout as the residual.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponseMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ResponseMap {
    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub row: usize,
    pub col: usize,
    pub sigma_eff: f64,
    pub radius: f64,
    pub response: f64,
    /// Residual sum inside the (edge-clipped) disk.
    pub mass: f64,
}

impl Blob {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        let dy = row as f64 - self.row as f64;
        let dx = col as f64 - self.col as f64;
        dy * dy + dx * dx <= self.radius * self.radius
    }

    /// Pixels of the disk clipped to a `height x width` image.
    pub fn disk_pixels(&self, height: usize, width: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let r = self.radius.floor() as isize;
        let (r0, c0) = (self.row as isize, self.col as isize);
        let rows = (r0 - r).max(0)..=(r0 + r).min(height as isize - 1);
        rows.flat_map(move |row| {
            let cols = (c0 - r).max(0)..=(c0 + r).min(width as isize - 1);
            cols.map(move |col| (row as usize, col as usize))
        })
        .filter(|&(row, col)| self.contains(row, col))
    }
}

/// Channel-mean of |hr − sr|.
pub fn subtract(sr: &Image, hr: &Image) -> Result<ResidualImage> {
    if !sr.same_shape(hr) {
        return Err(Error::ShapeMismatch(format!(
            "sr is {:?} but hr is {:?} (height, width, channels)",
            sr.dims(),
            hr.dims()
        )));
    }
    let (h, w, c) = sr.dims();
    let data = sr
        .data()
        .chunks(c)
        .zip(hr.data().chunks(c))
        .map(|(s, t)| s.iter().zip(t).map(|(a, b)| (b - a).abs()).sum::<f64>() / c as f64)
        .collect();
    Ok(ResidualImage::new(h, w, data, h.min(w)))
}

/// Unit-sum sampled Gaussian truncated at `ceil(3 sigma)`; index `i` holds
/// offset `i - radius`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Half-sample symmetric reflection of an index into `0..n`.
#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

fn blur(data: &[f64], height: usize, width: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; data.len()];
    for row in 0..height {
        let line = &data[row * width..(row + 1) * width];
        for col in 0..width {
            let mut acc = 0.0;
            for (k, &wgt) in kernel.iter().enumerate() {
                acc += wgt * line[reflect(col as isize + k as isize - r, width)];
            }
            tmp[row * width + col] = acc;
        }
    }
    let mut out = vec![0.0; data.len()];
    for row in 0..height {
        for (k, &wgt) in kernel.iter().enumerate() {
            let src = reflect(row as isize + k as isize - r, height);
            let src_line = &tmp[src * width..(src + 1) * width];
            let dst = &mut out[row * width..(row + 1) * width];
            for (d, s) in dst.iter_mut().zip(src_line) {
                *d += wgt * s;
            }
        }
    }
    out
}

fn effective_n(residual: &ResidualImage, cfg: &ArmConfig) -> usize {
    cfg.source_size.unwrap_or(residual.source_size)
}

/// `G(sigma1) * residual − G(sigma2) * residual`, reflective borders.
pub fn dog_response(residual: &ResidualImage, cfg: &ArmConfig) -> Result<ResponseMap> {
    cfg.validate()?;
    let n = effective_n(residual, cfg);
    if n == 0 {
        return Err(Error::InvalidInput("residual source_size must be positive".into()));
    }
    let (s1, s2) = cfg.sigmas(n);
    let (k1, k2) = (gaussian_kernel(s1), gaussian_kernel(s2));
    let side = residual.height.min(residual.width);
    if k2.len() > side {
        return Err(Error::KernelTooLarge(format!(
            "truncated Gaussian of sigma {s2:.3} spans {} px but the residual is {}x{}; \
             use a larger image or smaller sigma ratios",
            k2.len(),
            residual.height,
            residual.width
        )));
    }
    let a = blur(&residual.data, residual.height, residual.width, &k1);
    let b = blur(&residual.data, residual.height, residual.width, &k2);
    Ok(ResponseMap {
        height: residual.height,
        width: residual.width,
        data: a.iter().zip(&b).map(|(x, y)| x - y).collect(),
    })
}

/// Strict local maximum within the window; exact ties go to the pixel that
/// comes first in raster order.
fn is_window_max(resp: &ResponseMap, row: usize, col: usize, half: usize) -> bool {
    let v = resp.get(row, col);
    let here = row * resp.width + col;
    for r in row.saturating_sub(half)..=(row + half).min(resp.height - 1) {
        for c in col.saturating_sub(half)..=(col + half).min(resp.width - 1) {
            let other = resp.get(r, c);
            let idx = r * resp.width + c;
            if idx != here && (other > v || (other == v && idx < here)) {
                return false;
            }
        }
    }
    true
}

/// Blobs sorted by descending response, ties by `(row, col)`.
pub fn detect_blobs(residual: &ResidualImage, cfg: &ArmConfig) -> Result<Vec<Blob>> {
    let resp = dog_response(residual, cfg)?;
    Ok(blobs_from_response(residual, &resp, cfg))
}

pub(crate) fn blobs_from_response(residual: &ResidualImage, resp: &ResponseMap, cfg: &ArmConfig) -> Vec<Blob> {
    let n = effective_n(residual, cfg);
    let sigma_eff = cfg.blob_sigma(n);
    let radius = cfg.blob_radius(n);
    let half = cfg.nms_window / 2;
    let mut blobs = Vec::new();
    for row in 0..resp.height {
        for col in 0..resp.width {
            let v = resp.get(row, col);
            if v <= 0.0 || v < cfg.response_threshold || !is_window_max(resp, row, col, half) {
                continue;
            }
            let mut blob = Blob { row, col, sigma_eff, radius, response: v, mass: 0.0 };
            blob.mass = blob.disk_pixels(residual.height, residual.width).map(|(r, c)| residual.get(r, c)).sum();
            if blob.mass >= cfg.min_mass {
                blobs.push(blob);
            }
        }
    }
    blobs.sort_by(|a, b| {
        b.response
            .total_cmp(&a.response)
            .then(a.row.cmp(&b.row))
            .then(a.col.cmp(&b.col))
    });
    blobs
}

/// Penalty for one pair: sum of blob masses.
pub fn arm_loss(sr: &Image, hr: &Image, cfg: &ArmConfig) -> Result<f64> {
    let residual = subtract(sr, hr)?;
    Ok(detect_blobs(&residual, cfg)?.iter().map(|b| b.mass).sum())
}

/// Number of disks covering each pixel.
pub fn coverage_mask(blobs: &[Blob], height: usize, width: usize) -> Vec<f64> {
    let mut mask = vec![0.0; height * width];
    for blob in blobs {
        for (r, c) in blob.disk_pixels(height, width) {
            mask[r * width + c] += 1.0;
        }
    }
    mask
}

/// Differentiable penalty over an NCHW batch, averaged over the batch.
///
/// Blobs are detected on detached values; the returned var is
/// `mean_b sum_i sum_{p in disk_i} mean_c |sr - hr|`, which flows gradient
/// into `sr` pixels only. Also returns the blobs found per image.
pub fn arm_loss_batch<'g>(sr: Var<'g>, hr: &Tensor, cfg: &ArmConfig) -> Result<(Var<'g>, Vec<Vec<Blob>>)> {
    let srv = sr.value();
    if srv.shape() != hr.shape() {
        return Err(Error::ShapeMismatch(format!("sr batch {:?} vs hr batch {:?}", srv.shape(), hr.shape())));
    }
    let (n, c, h, w) = hr.dims4();
    let hw = h * w;
    let mut mask = vec![0.0; n * c * hw];
    let mut all_blobs = Vec::with_capacity(n);
    for b in 0..n {
        let off = b * c * hw;
        let mut res = vec![0.0; hw];
        for ch in 0..c {
            let s = &srv.data()[off + ch * hw..off + (ch + 1) * hw];
            let t = &hr.data()[off + ch * hw..off + (ch + 1) * hw];
            for ((r, a), b) in res.iter_mut().zip(s).zip(t) {
                *r += (b - a).abs();
            }
        }
        res.iter_mut().for_each(|v| *v /= c as f64);
        let residual = ResidualImage::new(h, w, res, h.min(w));
        let blobs = detect_blobs(&residual, cfg)?;
        let cover = coverage_mask(&blobs, h, w);
        let scale = 1.0 / (c * n) as f64;
        for ch in 0..c {
            for (m, k) in mask[off + ch * hw..off + (ch + 1) * hw].iter_mut().zip(&cover) {
                *m = k * scale;
            }
        }
        all_blobs.push(blobs);
    }
    let graph = sr.graph();
    let hr_var = graph.constant(hr.clone());
    let mask_var = graph.constant(Tensor::new(hr.shape().to_vec(), mask));
    let loss = sr.sub(&hr_var).abs().mul(&mask_var).sum();
    Ok((loss, all_blobs))
}
