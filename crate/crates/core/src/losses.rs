//! Generator objective (adversarial + perceptual + L1 + artifact terms) and
//! the relativistic-average discriminator objective.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arm::{self, ArmConfig, Blob};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::Init;
use crate::tensor::Tensor;

/// Floor applied inside every log.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Adversarial weight.
    pub lambda_adv: f64,
    /// Pixel L1 weight.
    pub eta_l1: f64,
    /// Artifact (blob mass) weight; zero gives the plain ESRGAN objective.
    pub beta_arm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_adv: 5e-3, eta_l1: 1e-2, beta_arm: 5e-3 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.lambda_adv, self.eta_l1, self.beta_arm].iter().all(|w| *w >= 0.0 && w.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("loss weights must be finite and >= 0: {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub adv_g: f64,
    pub percep: f64,
    pub l1: f64,
    pub arm: f64,
    pub adv_d: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossBreakdown {
    /// `lambda * adv_g + percep + eta * l1 + beta * arm`.
    pub fn recombined_total(&self) -> f64 {
        let w = &self.weights;
        w.lambda_adv * self.adv_g + self.percep + w.eta_l1 * self.l1 + w.beta_arm * self.arm
    }

    pub fn is_finite(&self) -> bool {
        [self.adv_g, self.percep, self.l1, self.arm, self.adv_d, self.total].iter().all(|v| v.is_finite())
    }
}

/// Feature map used by the perceptual term.
pub trait FeatureExtractor {
    /// Identifies the weights (for config echoes).
    fn descriptor(&self) -> String;

    /// `[n, 3, h, w]` images to a feature tensor whose shape depends only on
    /// the input shape.
    fn features<'g>(&self, x: Var<'g>) -> Result<Var<'g>>;
}

pub const TEST_EXTRACTOR_GAIN: f64 = 32.0;

/// Pixels as features; reduces the perceptual term to an L1 loss.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityExtractor;

impl FeatureExtractor for IdentityExtractor {
    fn descriptor(&self) -> String {
        "identity".into()
    }

    fn features<'g>(&self, x: Var<'g>) -> Result<Var<'g>> {
        Ok(x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
}

/// Frozen stack of 3×3 convolutions with leaky-ReLU between layers; output
/// is taken before the final activation and multiplied by `gain`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvFeatureExtractor {
    pub descriptor: String,
    pub layers: Vec<ConvLayer>,
    pub slope: f64,
    #[serde(default = "unit_gain")]
    pub gain: f64,
}

fn unit_gain() -> f64 {
    1.0
}

impl ConvFeatureExtractor {
    /// Seeded random weights; `widths[i]` output channels with `strides[i]`.
    pub fn random(seed: u64, widths: &[usize], strides: &[usize]) -> Self {
        assert_eq!(widths.len(), strides.len());
        let mut init = Init::new(seed);
        let mut in_ch = 3;
        let layers = widths
            .iter()
            .zip(strides)
            .map(|(&w, &s)| {
                let weight = init.kaiming(&[w, in_ch, 3, 3], in_ch * 9, 0.2, 1.0);
                in_ch = w;
                ConvLayer { weight, bias: Tensor::zeros(&[w]), stride: s }
            })
            .collect();
        Self {
            descriptor: format!("random-conv(seed={seed}, widths={widths:?}, strides={strides:?})"),
            layers,
            slope: 0.2,
            gain: 1.0,
        }
    }

    pub fn with_gain(mut self, gain: f64) -> Self {
        self.descriptor = format!("{}*{gain}", self.descriptor);
        self.gain = gain;
        self
    }

    /// Default perceptual substitute used in tests and desk-scale runs. The
    /// gain brings its distances on bicubic reconstructions to order one,
    /// the scale the adversarial and L1 weights are balanced against.
    pub fn test_default() -> Self {
        Self::random(0x5eed, &[8, 16], &[1, 2]).with_gain(TEST_EXTRACTOR_GAIN)
    }

    /// Load weights exported as JSON (`{descriptor, layers: [{weight, bias, stride}], slope}`).
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let fx: Self = serde_json::from_str(&text)?;
        let mut in_ch = 3;
        for (i, layer) in fx.layers.iter().enumerate() {
            let s = layer.weight.shape();
            if s.len() != 4 || s[1] != in_ch || s[2] != 3 || s[3] != 3 || layer.bias.shape() != [s[0]] {
                return Err(Error::InvalidInput(format!("{}: layer {i} has inconsistent shape {s:?}", path.display())));
            }
            in_ch = s[0];
        }
        Ok(fx)
    }
}

impl FeatureExtractor for ConvFeatureExtractor {
    fn descriptor(&self) -> String {
        self.descriptor.clone()
    }

    fn features<'g>(&self, x: Var<'g>) -> Result<Var<'g>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::ShapeMismatch(format!("feature extractor expects [n, 3, h, w], got {shape:?}")));
        }
        let g = x.graph();
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = h.leaky_relu(self.slope);
            }
            let w = g.constant(layer.weight.clone());
            let b = g.constant(layer.bias.clone());
            h = h.conv2d(&w, Some(&b), layer.stride, 1);
        }
        Ok(if self.gain == 1.0 { h } else { h.scale(self.gain) })
    }
}

/// Loss weights plus the perceptual extractor selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_adv: f64,
    pub eta_l1: f64,
    pub beta_arm: f64,
    /// `"identity"`, `"random-conv"` (the seeded default) or `"file:<path>"`.
    pub perceptual: String,
}

impl Default for LossConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self { lambda_adv: w.lambda_adv, eta_l1: w.eta_l1, beta_arm: w.beta_arm, perceptual: "random-conv".into() }
    }
}

impl LossConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights { lambda_adv: self.lambda_adv, eta_l1: self.eta_l1, beta_arm: self.beta_arm }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights().validate()?;
        match self.perceptual.as_str() {
            "identity" | "random-conv" => Ok(()),
            s if s.starts_with("file:") => Ok(()),
            s => Err(Error::InvalidConfig(format!(
                "loss.perceptual must be \"identity\", \"random-conv\" or \"file:<path>\", got {s:?}"
            ))),
        }
    }

    pub fn extractor(&self) -> Result<Box<dyn FeatureExtractor>> {
        load_extractor(&self.perceptual)
    }
}

/// Resolve an extractor selection string (see [`LossConfig::perceptual`]).
pub fn load_extractor(name: &str) -> Result<Box<dyn FeatureExtractor>> {
    match name {
        "identity" => Ok(Box::new(IdentityExtractor)),
        "random-conv" => Ok(Box::new(ConvFeatureExtractor::test_default())),
        s => match s.strip_prefix("file:") {
            Some(path) => Ok(Box::new(ConvFeatureExtractor::from_json_file(path)?)),
            None => Err(Error::InvalidConfig(format!("unknown perceptual extractor {s:?}"))),
        },
    }
}

fn check_logits(real: &[f64], fake: &[f64]) -> Result<()> {
    if real.is_empty() || fake.is_empty() {
        return Err(Error::InvalidInput("logit vectors must be non-empty".into()));
    }
    Ok(())
}

fn logit_vars<'g>(g: &'g Graph, real: &[f64], fake: &[f64]) -> (Var<'g>, Var<'g>) {
    (
        g.constant(Tensor::new(vec![real.len()], real.to_vec())),
        g.constant(Tensor::new(vec![fake.len()], fake.to_vec())),
    )
}

/// `(sigmoid(real - mean fake), sigmoid(fake - mean real))`.
pub fn relativistic_pair_var<'g>(real: Var<'g>, fake: Var<'g>) -> (Var<'g>, Var<'g>) {
    let d_real = real.sub_scalar(&fake.mean()).sigmoid();
    let d_fake = fake.sub_scalar(&real.mean()).sigmoid();
    (d_real, d_fake)
}

pub fn relativistic_pair(real: &[f64], fake: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_logits(real, fake)?;
    let g = Graph::new();
    let (r, f) = logit_vars(&g, real, fake);
    let (a, b) = relativistic_pair_var(r, f);
    let (a, b) = (a.value().data().to_vec(), b.value().data().to_vec());
    Ok((a, b))
}

/// `-mean log D(real, fake) - mean log(1 - D(fake, real))`.
pub fn discriminator_loss_var<'g>(real: Var<'g>, fake: Var<'g>) -> Var<'g> {
    let (d_real, d_fake) = relativistic_pair_var(real, fake);
    let a = d_real.ln_clamped(LOG_FLOOR).mean();
    let b = d_fake.affine(-1.0, 1.0).ln_clamped(LOG_FLOOR).mean();
    a.add(&b).scale(-1.0)
}

/// Symmetric counterpart: `-mean log(1 - D(real, fake)) - mean log D(fake, real)`.
pub fn generator_adv_loss_var<'g>(real: Var<'g>, fake: Var<'g>) -> Var<'g> {
    discriminator_loss_var(fake, real)
}

pub fn discriminator_loss(real: &[f64], fake: &[f64]) -> Result<f64> {
    check_logits(real, fake)?;
    let g = Graph::new();
    let (r, f) = logit_vars(&g, real, fake);
    Ok(discriminator_loss_var(r, f).item())
}

pub fn generator_adv_loss(real: &[f64], fake: &[f64]) -> Result<f64> {
    check_logits(real, fake)?;
    let g = Graph::new();
    let (r, f) = logit_vars(&g, real, fake);
    Ok(generator_adv_loss_var(r, f).item())
}

/// Mean absolute feature difference.
pub fn perceptual_loss_var<'g>(sr: Var<'g>, hr: Var<'g>, fx: &dyn FeatureExtractor) -> Result<Var<'g>> {
    if sr.shape() != hr.shape() {
        return Err(Error::ShapeMismatch(format!("sr {:?} vs hr {:?}", sr.shape(), hr.shape())));
    }
    let a = fx.features(sr)?;
    let b = fx.features(hr)?;
    Ok(a.sub(&b).abs().mean())
}

pub fn perceptual_loss(sr: &Tensor, hr: &Tensor, fx: &dyn FeatureExtractor) -> Result<f64> {
    let g = Graph::new();
    Ok(perceptual_loss_var(g.constant(sr.clone()), g.constant(hr.clone()), fx)?.item())
}

/// Mean absolute pixel difference.
pub fn l1_loss_var<'g>(sr: Var<'g>, hr: Var<'g>) -> Var<'g> {
    sr.sub(&hr).abs().mean()
}

/// Result of [`total_generator_loss`]: the differentiable total plus the
/// reported terms.
pub struct GeneratorObjective<'g> {
    pub total: Var<'g>,
    pub breakdown: LossBreakdown,
    pub blobs: Vec<Vec<Blob>>,
}

/// Weighted generator objective. `sr` carries gradient; `hr` is constant;
/// `real_logits`/`fake_logits` are the critic outputs on `hr`/`sr`.
/// The `adv_d` field is left at zero for the caller to fill in.
#[allow(clippy::too_many_arguments)]
pub fn total_generator_loss<'g>(
    sr: Var<'g>,
    hr: &Tensor,
    real_logits: Var<'g>,
    fake_logits: Var<'g>,
    weights: &LossWeights,
    arm_cfg: &ArmConfig,
    fx: &dyn FeatureExtractor,
) -> Result<GeneratorObjective<'g>> {
    weights.validate()?;
    if real_logits.value().is_empty() || fake_logits.value().is_empty() {
        return Err(Error::InvalidInput("logit vectors must be non-empty".into()));
    }
    let g = sr.graph();
    let hr_var = g.constant(hr.clone());
    let adv = generator_adv_loss_var(real_logits, fake_logits);
    let percep = perceptual_loss_var(sr, hr_var, fx)?;
    let l1 = l1_loss_var(sr, hr_var);
    let (arm, blobs) = arm::arm_loss_batch(sr, hr, arm_cfg)?;
    let total = adv
        .scale(weights.lambda_adv)
        .add(&percep)
        .add(&l1.scale(weights.eta_l1))
        .add(&arm.scale(weights.beta_arm));
    let breakdown = LossBreakdown {
        adv_g: adv.item(),
        percep: percep.item(),
        l1: l1.item(),
        arm: arm.item(),
        adv_d: 0.0,
        total: total.item(),
        weights: *weights,
    };
    Ok(GeneratorObjective { total, breakdown, blobs })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn symmetric_logits_give_half() {
        let (a, b) = relativistic_pair(&[0.7; 3], &[0.7; 3]).unwrap();
        assert!(a.iter().chain(&b).all(|v| (v - 0.5).abs() < 1e-15));
        let two_ln2 = 2.0 * 2f64.ln();
        assert!((discriminator_loss(&[0.3; 4], &[0.3; 4]).unwrap() - two_ln2).abs() < 1e-12);
        assert!((generator_adv_loss(&[0.3; 4], &[0.3; 4]).unwrap() - two_ln2).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_pair() {
        // mean(fake) = 1, mean(real) = 2
        let (a, b) = relativistic_pair(&[1.0, 3.0], &[0.0, 2.0]).unwrap();
        assert!((a[0] - sigmoid(0.0)).abs() < 1e-15 && (a[1] - sigmoid(2.0)).abs() < 1e-15);
        assert!((b[0] - sigmoid(-2.0)).abs() < 1e-15 && (b[1] - sigmoid(0.0)).abs() < 1e-15);

        let d = -0.5 * (sigmoid(0.0).ln() + sigmoid(2.0).ln()) - 0.5 * ((1.0 - sigmoid(-2.0)).ln() + (1.0 - sigmoid(0.0)).ln());
        assert!((discriminator_loss(&[1.0, 3.0], &[0.0, 2.0]).unwrap() - d).abs() < 1e-12);
        let gl = -0.5 * ((1.0 - sigmoid(0.0)).ln() + (1.0 - sigmoid(2.0)).ln()) - 0.5 * (sigmoid(-2.0).ln() + sigmoid(0.0).ln());
        assert!((generator_adv_loss(&[1.0, 3.0], &[0.0, 2.0]).unwrap() - gl).abs() < 1e-12);
    }

    #[test]
    fn saturation_limits() {
        let (a, b) = relativistic_pair(&[60.0], &[-60.0]).unwrap();
        assert!(a[0] > 1.0 - 1e-12 && b[0] < 1e-12);
        assert!(discriminator_loss(&[60.0], &[-60.0]).unwrap() < 1e-12);
        assert!(generator_adv_loss(&[-60.0], &[60.0]).unwrap() < 1e-12);
        // clamped, not infinite
        assert!(generator_adv_loss(&[1e6], &[-1e6]).unwrap().is_finite());
    }

    #[test]
    fn empty_logits_rejected() {
        assert!(relativistic_pair(&[], &[1.0]).is_err());
        assert!(discriminator_loss(&[1.0], &[]).is_err());
    }

    #[test]
    fn identity_extractor_reduces_to_l1() {
        let a = Tensor::new(vec![1, 3, 2, 2], (0..12).map(|i| i as f64 / 12.0).collect());
        let b = a.map(|v| (1.0 - v) * 0.5);
        let want = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / 12.0;
        assert!((perceptual_loss(&a, &b, &IdentityExtractor).unwrap() - want).abs() < 1e-15);
        assert_eq!(perceptual_loss(&a, &a, &ConvFeatureExtractor::test_default()).unwrap(), 0.0);
    }
}
