//! Generator (RRDB trunk + 4× nearest-neighbour upsampling) and the deep
//! six-block discriminator.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::upsample_bicubic;
use crate::error::{Error, Result};
use crate::image::{batch_to_images, images_to_batch, Image};
use crate::nn::{BatchNorm2d, Bound, Conv2d, Init, Linear, ParamStore};
use crate::tensor::Tensor;

const LRELU_SLOPE: f64 = 0.2;
const CONVS_PER_DENSE_BLOCK: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub num_rrdb: usize,
    /// Residual dense blocks inside each RRDB.
    pub dense_blocks: usize,
    pub base_channels: usize,
    pub growth_channels: usize,
    pub residual_scale: f64,
    pub upscale_factor: usize,
    /// Add the bicubic upsampling of the input to the output, so the network
    /// only learns the detail residual.
    pub bicubic_skip: bool,
}

impl Default for GeneratorConfig {
    /// 23 RRDB units of five convolutions each: a 115-convolution trunk.
    fn default() -> Self {
        Self {
            num_rrdb: 23,
            dense_blocks: 1,
            base_channels: 64,
            growth_channels: 32,
            residual_scale: 0.2,
            upscale_factor: 4,
            bicubic_skip: false,
        }
    }
}

impl GeneratorConfig {
    /// Desk-scale model used by the tests and synthetic experiments.
    pub fn tiny() -> Self {
        Self { num_rrdb: 1, base_channels: 8, growth_channels: 8, bicubic_skip: true, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.num_rrdb < 1 {
            problems.push("num_rrdb must be >= 1".to_string());
        }
        if self.dense_blocks < 1 {
            problems.push("dense_blocks must be >= 1".to_string());
        }
        if self.base_channels < 1 || self.growth_channels < 1 {
            problems.push("channel counts must be positive".to_string());
        }
        if !(self.residual_scale > 0.0 && self.residual_scale <= 1.0) {
            problems.push(format!("residual_scale must lie in (0, 1], got {}", self.residual_scale));
        }
        if self.upscale_factor != 4 {
            problems.push(format!("only 4x upscaling is supported, got {}", self.upscale_factor));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems.join("; ")))
        }
    }

    pub fn trunk_conv_count(&self) -> usize {
        self.num_rrdb * self.dense_blocks * CONVS_PER_DENSE_BLOCK
    }
}

#[derive(Clone, Debug)]
struct DenseBlock {
    convs: Vec<Conv2d>,
}

impl DenseBlock {
    fn new(store: &mut ParamStore, init: &mut Init, name: &str, nf: usize, gc: usize) -> Self {
        let convs = (0..CONVS_PER_DENSE_BLOCK)
            .map(|i| {
                let out = if i + 1 == CONVS_PER_DENSE_BLOCK { nf } else { gc };
                Conv2d::new(store, init, &format!("{name}.conv{}", i + 1), nf + i * gc, out, 3, 1, 0.1)
            })
            .collect();
        Self { convs }
    }

    fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>, scale: f64) -> Var<'g> {
        let mut features = vec![x];
        for conv in &self.convs[..CONVS_PER_DENSE_BLOCK - 1] {
            let input = Var::concat_channels(&features);
            features.push(conv.forward(p, input).leaky_relu(LRELU_SLOPE));
        }
        let last = self.convs[CONVS_PER_DENSE_BLOCK - 1].forward(p, Var::concat_channels(&features));
        last.scale(scale).add(&x)
    }
}

#[derive(Clone, Debug)]
struct Rrdb {
    blocks: Vec<DenseBlock>,
}

impl Rrdb {
    fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>, scale: f64) -> Var<'g> {
        let out = self.blocks.iter().fold(x, |h, b| b.forward(p, h, scale));
        out.scale(scale).add(&x)
    }
}

/// 4× super-resolution generator.
#[derive(Clone, Debug)]
pub struct Generator {
    config: GeneratorConfig,
    params: ParamStore,
    conv_first: Conv2d,
    trunk: Vec<Rrdb>,
    trunk_conv: Conv2d,
    upconv1: Conv2d,
    upconv2: Conv2d,
    hr_conv: Conv2d,
    conv_last: Conv2d,
}

impl Generator {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let (nf, gc) = (config.base_channels, config.growth_channels);
        let conv_first = Conv2d::new(&mut store, &mut init, "conv_first", 3, nf, 3, 1, 1.0);
        let trunk = (0..config.num_rrdb)
            .map(|r| Rrdb {
                blocks: (0..config.dense_blocks)
                    .map(|d| DenseBlock::new(&mut store, &mut init, &format!("trunk.{r}.rdb{d}"), nf, gc))
                    .collect(),
            })
            .collect();
        let trunk_conv = Conv2d::new(&mut store, &mut init, "trunk_conv", nf, nf, 3, 1, 1.0);
        let upconv1 = Conv2d::new(&mut store, &mut init, "upconv1", nf, nf, 3, 1, 1.0);
        let upconv2 = Conv2d::new(&mut store, &mut init, "upconv2", nf, nf, 3, 1, 1.0);
        let hr_conv = Conv2d::new(&mut store, &mut init, "hr_conv", nf, nf, 3, 1, 1.0);
        let last_gain = if config.bicubic_skip { 0.1 } else { 1.0 };
        let conv_last = Conv2d::new(&mut store, &mut init, "conv_last", nf, 3, 3, 1, last_gain);
        Ok(Self { config, params: store, conv_first, trunk, trunk_conv, upconv1, upconv2, hr_conv, conv_last })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn trunk_conv_count(&self) -> usize {
        self.trunk.iter().flat_map(|r| &r.blocks).map(|b| b.convs.len()).sum()
    }

    pub fn conv_count(&self) -> usize {
        self.trunk_conv_count() + 6
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Unclamped output; `x` is `[n, 3, h, w]`, output `[n, 3, 4h, 4w]`.
    /// The bicubic skip is a constant: no gradient flows back into `x`
    /// through it.
    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::ShapeMismatch(format!("generator expects [n, 3, h, w], got {shape:?}")));
        }
        let scale = self.config.residual_scale;
        let fea = self.conv_first.forward(p, x);
        let trunk = self.trunk.iter().fold(fea, |h, block| block.forward(p, h, scale));
        let fea = fea.add(&self.trunk_conv.forward(p, trunk));
        let fea = self.upconv1.forward(p, fea.upsample_nearest2x()).leaky_relu(LRELU_SLOPE);
        let fea = self.upconv2.forward(p, fea.upsample_nearest2x()).leaky_relu(LRELU_SLOPE);
        let fea = self.hr_conv.forward(p, fea).leaky_relu(LRELU_SLOPE);
        let out = self.conv_last.forward(p, fea);
        if !self.config.bicubic_skip {
            return Ok(out);
        }
        let lr = x.value();
        let up: Vec<Image> = batch_to_images(&lr).iter().map(|i| upsample_bicubic(i, 4)).collect();
        Ok(out.add(&x.graph().constant(images_to_batch(&up)?)))
    }

    /// Inference on a batch, outputs clamped to [0, 1].
    pub fn infer(&self, lr: &Tensor) -> Result<Tensor> {
        let graph = Graph::new();
        let p = self.params.bind(&graph, false);
        let out = self.forward(&p, graph.constant(lr.clone()))?;
        let out = out.value().map(|v| v.clamp(0.0, 1.0));
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub input_size: usize,
    pub block_channels: Vec<usize>,
    pub lrelu_slope: f64,
    pub dense_units: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { input_size: 192, block_channels: vec![64, 128, 256, 512, 512, 512], lrelu_slope: 0.2, dense_units: 100 }
    }
}

impl DiscriminatorConfig {
    /// Narrow six-block variant for desk-scale training.
    pub fn tiny(input_size: usize) -> Self {
        Self { input_size, block_channels: vec![8, 8, 16, 16, 32, 32], ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.block_channels.len() != 6 {
            problems.push(format!("exactly six conv blocks required, got {}", self.block_channels.len()));
        }
        if self.input_size == 0 || self.input_size % 64 != 0 {
            problems.push(format!("input_size must be a positive multiple of 64, got {}", self.input_size));
        }
        if self.block_channels.contains(&0) || self.dense_units == 0 {
            problems.push("channel and unit counts must be positive".to_string());
        }
        if !(self.lrelu_slope >= 0.0 && self.lrelu_slope < 1.0) {
            problems.push(format!("lrelu_slope must lie in [0, 1), got {}", self.lrelu_slope));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems.join("; ")))
        }
    }
}

/// Generator and discriminator architecture.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl ModelConfig {
    /// Tiny generator and narrow critic for HR crops of `patch_size`.
    pub fn tiny(patch_size: usize) -> Self {
        Self { generator: GeneratorConfig::tiny(), discriminator: DiscriminatorConfig::tiny(patch_size) }
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.discriminator.validate()
    }
}

#[derive(Clone, Debug)]
struct ConvBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    norm: Option<BatchNorm2d>,
}

/// Relativistic critic: image `[n, 3, s, s]` to one unbounded logit each.
#[derive(Clone, Debug)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    params: ParamStore,
    blocks: Vec<ConvBlock>,
    dense: Linear,
    output: Linear,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let mut blocks = Vec::new();
        let mut in_ch = 3;
        let last = config.block_channels.len() - 1;
        for (i, &ch) in config.block_channels.iter().enumerate() {
            let conv1 = Conv2d::new(&mut store, &mut init, &format!("block{i}.conv1"), in_ch, ch, 3, 1, 1.0);
            let conv2 = Conv2d::new(&mut store, &mut init, &format!("block{i}.conv2"), ch, ch, 3, 2, 1.0);
            let norm = (i != last).then(|| BatchNorm2d::new(&mut store, &format!("block{i}.bn"), ch));
            blocks.push(ConvBlock { conv1, conv2, norm });
            in_ch = ch;
        }
        let side = config.input_size / 64;
        let dense = Linear::new(&mut store, &mut init, "dense", in_ch * side * side, config.dense_units);
        let output = Linear::new(&mut store, &mut init, "output", config.dense_units, 1);
        Ok(Self { config, params: store, blocks, dense, output })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn conv_block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Logits `[n, 1]`.
    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let shape = x.shape();
        let s = self.config.input_size;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(Error::ShapeMismatch(format!("discriminator expects [n, 3, {s}, {s}], got {shape:?}")));
        }
        let slope = self.config.lrelu_slope;
        let mut h = x;
        for block in &self.blocks {
            h = block.conv1.forward(p, h).leaky_relu(slope);
            h = block.conv2.forward(p, h);
            if let Some(norm) = &block.norm {
                h = norm.forward(p, h);
            }
            h = h.leaky_relu(slope);
        }
        let h = self.dense.forward(p, h.flatten()).leaky_relu(slope);
        Ok(self.output.forward(p, h))
    }

    /// Logits as plain numbers.
    pub fn logits(&self, images: &Tensor) -> Result<Vec<f64>> {
        let graph = Graph::new();
        let p = self.params.bind(&graph, false);
        let out = self.forward(&p, graph.constant(images.clone()))?;
        let v = out.value().data().to_vec();
        Ok(v)
    }
}
