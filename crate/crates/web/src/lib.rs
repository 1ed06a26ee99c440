//! Browser bindings for three small interactive views: the blob detector on
//! a planted residual, bicubic line profiles of a synthetic leaf, and
//! class-balanced loss weights.
//!
//! Results cross the boundary as JSON strings; pixel buffers are RGBA bytes
//! ready for `ImageData`.

use lassr_core::arm::{detect_blobs, ArmConfig, ResidualImage};
use lassr_core::classifier::class_balanced_weights;
use lassr_core::data::{downsample_bicubic, stream_rng, upsample_bicubic};
use lassr_core::evaluator::psnr;
use lassr_core::synth::{render_leaf, Environment, Lesion};
use lassr_core::Image;
use rand::Rng;
use serde_json::json;
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

/// Residual with `bumps` Gaussian blobs at seeded positions plus faint noise.
pub fn planted_residual(size: usize, bumps: usize, seed: u64) -> ResidualImage {
    let mut rng = stream_rng(seed, &[1]);
    let mut data: Vec<f64> = (0..size * size).map(|_| rng.random_range(0.0..0.004)).collect();
    for _ in 0..bumps {
        let cy = rng.random_range(0.15..0.85) * size as f64;
        let cx = rng.random_range(0.15..0.85) * size as f64;
        let sigma = rng.random_range(0.05..0.1) * size as f64;
        let amp = rng.random_range(0.15..0.4);
        for y in 0..size {
            for x in 0..size {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                data[y * size + x] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    ResidualImage::new(size, size, data, size)
}

fn gray_rgba(values: &[f64], scale: f64) -> Vec<u8> {
    values
        .iter()
        .flat_map(|v| {
            let g = (v * scale).clamp(0.0, 255.0) as u8;
            [g, g, g, 255]
        })
        .collect()
}

fn image_rgba(img: &Image) -> Vec<u8> {
    img.to_rgb8().chunks_exact(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect()
}

/// Plant bumps, run the detector and return the residual pixels together
/// with the detected blobs.
#[wasm_bindgen]
pub struct BlobView {
    size: usize,
    pixels: Vec<u8>,
    report: String,
}

#[wasm_bindgen]
impl BlobView {
    #[wasm_bindgen(constructor)]
    pub fn new(size: usize, bumps: usize, seed: u64, threshold: f64) -> Result<BlobView, JsValue> {
        let residual = planted_residual(size, bumps, seed);
        let cfg = ArmConfig { response_threshold: threshold, ..ArmConfig::default() };
        let blobs = detect_blobs(&residual, &cfg).map_err(js_err)?;
        let mass: f64 = blobs.iter().map(|b| b.mass).sum();
        let report = json!({ "blobs": blobs, "arm_loss": mass, "radius": cfg.blob_radius(size) }).to_string();
        Ok(BlobView { size, pixels: gray_rgba(&residual.data, 600.0), report })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn pixels(&self) -> Vec<u8> {
        self.pixels.clone()
    }

    pub fn report(&self) -> String {
        self.report.clone()
    }
}

/// A seeded leaf, its bicubic 4x round trip, and both images' profiles
/// along `row`.
#[wasm_bindgen]
pub struct ProfileView {
    size: usize,
    hr: Vec<u8>,
    bicubic: Vec<u8>,
    report: String,
}

#[wasm_bindgen]
impl ProfileView {
    #[wasm_bindgen(constructor)]
    pub fn new(size: usize, seed: u64, lesion: usize, row: usize) -> Result<ProfileView, JsValue> {
        if size % 4 != 0 || size == 0 {
            return Err(js_err("size must be a positive multiple of 4"));
        }
        let lesion = *Lesion::ALL.get(lesion).ok_or_else(|| js_err("lesion index out of range"))?;
        let hr = render_leaf(&mut stream_rng(seed, &[2]), size, &Environment::preset(0), lesion);
        let bicubic = upsample_bicubic(&downsample_bicubic(&hr, 4).map_err(js_err)?, 4);
        let row = row.min(size - 1);
        let profile = |img: &Image| (0..size).map(|x| img.channel_mean(row, x)).collect::<Vec<f64>>();
        let report = json!({
            "row": row,
            "hr": profile(&hr),
            "bicubic": profile(&bicubic),
            "psnr_db": psnr(&bicubic, &hr).map_err(js_err)?,
        })
        .to_string();
        Ok(ProfileView { size, hr: image_rgba(&hr), bicubic: image_rgba(&bicubic), report })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn hr(&self) -> Vec<u8> {
        self.hr.clone()
    }

    pub fn bicubic(&self) -> Vec<u8> {
        self.bicubic.clone()
    }

    pub fn report(&self) -> String {
        self.report.clone()
    }
}

/// Per-class loss weights for the given counts, normalized to sum to the
/// number of classes.
#[wasm_bindgen]
pub fn class_weights(counts: &[u32], beta: f64) -> Result<Vec<f64>, JsValue> {
    let counts: Vec<usize> = counts.iter().map(|&c| c as usize).collect();
    class_balanced_weights(&counts, beta).map_err(js_err)
}
