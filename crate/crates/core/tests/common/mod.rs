#![allow(dead_code)]

use lassr_core::arm::{ArmConfig, ResidualImage};
use lassr_core::data::stream_rng;
use lassr_core::synth::{render_leaf, Environment, Lesion};
use lassr_core::Image;
use rand::Rng;

/// Faint uniform noise plus `bumps` Gaussian bumps at seeded positions.
/// Returns the residual and the planted centers.
pub fn planted(size: usize, bumps: usize, seed: u64) -> (ResidualImage, Vec<(f64, f64)>) {
    let mut rng = stream_rng(seed, &[900]);
    let mut data: Vec<f64> = (0..size * size).map(|_| rng.random_range(0.0..0.003)).collect();
    let mut centers = Vec::new();
    for _ in 0..bumps {
        let cy = rng.random_range(0.2..0.8) * size as f64;
        let cx = rng.random_range(0.2..0.8) * size as f64;
        let sigma = rng.random_range(0.06..0.09) * size as f64;
        let amp = rng.random_range(0.2..0.4);
        for y in 0..size {
            for x in 0..size {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                data[y * size + x] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
        centers.push((cy, cx));
    }
    (ResidualImage::new(size, size, data, size), centers)
}

fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let p = i.rem_euclid(2 * n);
    (if p < n { p } else { 2 * n - 1 - p }) as usize
}

/// Direct 2-D Gaussian blur over the full square window, mirrored borders.
fn blur2d(res: &ResidualImage, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let mut w = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            w.push(((dy, dx), (-((dy * dy + dx * dx) as f64) / (2.0 * sigma * sigma)).exp()));
        }
    }
    let z: f64 = w.iter().map(|(_, v)| v).sum();
    let mut out = vec![0.0; res.data.len()];
    for y in 0..res.height {
        for x in 0..res.width {
            let mut acc = 0.0;
            for &((dy, dx), v) in &w {
                acc += v * res.get(mirror(y as isize + dy, res.height), mirror(x as isize + dx, res.width));
            }
            out[y * res.width + x] = acc / z;
        }
    }
    out
}

/// Exhaustive DoG plus 3x3 maxima search: `(row, col, mass)` in raster order.
pub fn brute_force_blobs(res: &ResidualImage, cfg: &ArmConfig) -> Vec<(usize, usize, f64)> {
    let n = cfg.source_size.unwrap_or(res.source_size) as f64;
    let (s1, s2) = (cfg.sigma1_ratio * n, cfg.sigma2_ratio * n);
    let a = blur2d(res, s1);
    let b = blur2d(res, s2);
    let dog: Vec<f64> = a.iter().zip(&b).map(|(p, q)| p - q).collect();
    let radius = (2.0 * s1 * s2).sqrt();
    let (h, w) = (res.height as isize, res.width as isize);
    let mut found = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = dog[(y * w + x) as usize];
            if v <= 0.0 || v < cfg.response_threshold {
                continue;
            }
            let mut is_max = true;
            for ny in (y - 1).max(0)..=(y + 1).min(h - 1) {
                for nx in (x - 1).max(0)..=(x + 1).min(w - 1) {
                    if (ny, nx) != (y, x) && dog[(ny * w + nx) as usize] >= v {
                        is_max = false;
                    }
                }
            }
            if !is_max {
                continue;
            }
            let mut mass = 0.0;
            for py in 0..h {
                for px in 0..w {
                    if (((py - y).pow(2) + (px - x).pow(2)) as f64) <= radius * radius {
                        mass += res.get(py as usize, px as usize);
                    }
                }
            }
            found.push((y as usize, x as usize, mass));
        }
    }
    found
}

/// Seeded leaves over the three capture environments.
pub fn leaves(n: usize, size: usize, seed: u64) -> Vec<Image> {
    (0..n)
        .map(|i| {
            let mut r = stream_rng(seed, &[10, i as u64]);
            let lesion = Lesion::ALL[r.random_range(0..5)];
            let env = Environment::preset(r.random_range(0..3));
            render_leaf(&mut r, size, &env, lesion)
        })
        .collect()
}

pub fn random_image(size: usize, seed: u64) -> Image {
    let mut rng = stream_rng(seed, &[901]);
    Image::new(size, size, 3, (0..size * size * 3).map(|_| rng.random_range(0.0..1.0)).collect())
}

/// Largest relative gap between analytic and central-difference gradients
/// of the weighted generator objective w.r.t. `coords` SR pixels.
pub fn generator_gradient_gap(coords: usize, seed: u64) -> f64 {
    use lassr_core::autograd::Graph;
    use lassr_core::image::images_to_batch;
    use lassr_core::losses::{total_generator_loss, ConvFeatureExtractor, LossConfig};
    use lassr_core::networks::{Discriminator, DiscriminatorConfig};
    use lassr_core::synth::inject_stamp;
    use lassr_core::Tensor;

    let size = 64;
    let hr = leaves(2, size, seed);
    let sr: Vec<Image> = hr
        .iter()
        .enumerate()
        .map(|(i, h)| {
            let mut s = h.clone();
            let noise = random_image(size, seed + i as u64);
            for (v, n) in s.data_mut().iter_mut().zip(noise.data()) {
                *v += 0.04 * (n - 0.5);
            }
            inject_stamp(&mut s, (20 + 10 * i, 30), 5.0, 0.3);
            s
        })
        .collect();
    let hr_t = images_to_batch(&hr).unwrap();
    let sr_t = images_to_batch(&sr).unwrap();
    let d = Discriminator::new(DiscriminatorConfig::tiny(size), seed).unwrap();
    let fx = ConvFeatureExtractor::test_default();
    let weights = LossConfig::default().weights();
    let arm = ArmConfig::default();

    let eval = |x: &Tensor| -> (f64, Option<Tensor>) {
        let g = Graph::new();
        let sr = g.param(x.clone());
        let dp = d.params().bind(&g, false);
        let real = d.forward(&dp, g.constant(hr_t.clone())).unwrap();
        let fake = d.forward(&dp, sr).unwrap();
        let obj = total_generator_loss(sr, &hr_t, real, fake, &weights, &arm, &fx).unwrap();
        let value = obj.total.item();
        let grads = g.backward(obj.total);
        (value, grads.get(sr).cloned())
    };
    let (_, analytic) = eval(&sr_t);
    let analytic = analytic.expect("sr receives a gradient");
    let mut rng = stream_rng(seed, &[902]);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..coords {
        let i = rng.random_range(0..sr_t.len());
        let mut plus = sr_t.clone();
        plus.data_mut()[i] += h;
        let mut minus = sr_t.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
        let a = analytic.data()[i];
        let scale = a.abs().max(numeric.abs()).max(1e-7);
        worst = worst.max((a - numeric).abs() / scale);
    }
    worst
}

/// `(1 - b) / (1 - b^n)` for `b = num / den`, with `b^n` in exact integer
/// arithmetic, rescaled to sum to the class count.
pub fn cb_weights_exact(counts: &[usize], num: u64, den: u64) -> Vec<f64> {
    use num_bigint::BigUint;
    let digits = BigUint::from(10u32).pow(40);
    let raw: Vec<f64> = counts
        .iter()
        .map(|&n| {
            let top = BigUint::from(den).pow(n as u32);
            let tail = &top - BigUint::from(num).pow(n as u32);
            let scaled: f64 = (tail * &digits / &top).to_string().parse().unwrap();
            ((den - num) as f64 / den as f64) / (scaled / 1e40)
        })
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.iter().map(|w| w * counts.len() as f64 / sum).collect()
}
