//! Downstream disease classification on differently preprocessed inputs,
//! trained with the class-balanced softmax loss.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::data::{downsample_bicubic, stream_rng, upsample_bicubic, DatasetManifest, ManifestEntry, Split};
use crate::error::{Error, Result};
use crate::evaluator::{super_resolve, TileConfig};
use crate::image::{images_to_batch, Image};
use crate::tensor::Tensor;
use crate::networks::Generator;
use crate::nn::{Adam, AdamConfig, Conv2d, Init, Linear, ParamStore};

/// Class weights `(1 - beta) / (1 - beta^n)` rescaled to sum to the class
/// count.
pub fn class_balanced_weights(counts: &[usize], beta: f64) -> Result<Vec<f64>> {
    if counts.is_empty() {
        return Err(Error::InvalidInput("class_balanced_weights needs at least one class".into()));
    }
    if let Some(i) = counts.iter().position(|&n| n == 0) {
        return Err(Error::InvalidInput(format!("class {i} has zero samples; class-balanced weights need n >= 1")));
    }
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::InvalidConfig(format!("cb_beta must lie in [0, 1), got {beta}")));
    }
    let raw: Vec<f64> = if beta == 0.0 {
        vec![1.0; counts.len()]
    } else {
        let ln_beta = (-(1.0 - beta)).ln_1p();
        counts.iter().map(|&n| (1.0 - beta) / -(n as f64 * ln_beta).exp_m1()).collect()
    };
    let sum: f64 = raw.iter().sum();
    Ok(raw.iter().map(|w| w * counts.len() as f64 / sum).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "LR")]
    Lr,
    #[serde(rename = "Bicubic")]
    Bicubic,
    #[serde(rename = "NoARM-SR")]
    NoArmSr,
    #[serde(rename = "LASSR")]
    Lassr,
    #[serde(rename = "HR")]
    Hr,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Lr, Variant::Bicubic, Variant::NoArmSr, Variant::Lassr, Variant::Hr];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Lr => "LR",
            Variant::Bicubic => "Bicubic",
            Variant::NoArmSr => "NoARM-SR",
            Variant::Lassr => "LASSR",
            Variant::Hr => "HR",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown variant {s:?}; expected LR, Bicubic, NoARM-SR, LASSR or HR")))
    }

    pub fn needs_generator(self) -> bool {
        matches!(self, Variant::NoArmSr | Variant::Lassr)
    }

    pub fn pipeline(self) -> &'static str {
        match self {
            Variant::Lr => "1/4 bicubic downsample",
            Variant::Bicubic => "1/4 bicubic downsample, 4x bicubic upsample",
            Variant::NoArmSr => "1/4 bicubic downsample, 4x SR (generator trained with beta_arm = 0)",
            Variant::Lassr => "1/4 bicubic downsample, 4x SR (generator trained with the artifact term)",
            Variant::Hr => "passthrough",
        }
    }

    /// Apply the variant's preprocessing to one HR image.
    pub fn transform(self, hr: &Image, generator: Option<&Generator>, tiles: &TileConfig) -> Result<Image> {
        match self {
            Variant::Hr => Ok(hr.clone()),
            Variant::Lr => downsample_bicubic(hr, 4),
            Variant::Bicubic => Ok(upsample_bicubic(&downsample_bicubic(hr, 4)?, 4).clamp01()),
            Variant::NoArmSr | Variant::Lassr => {
                let g = generator.ok_or_else(|| {
                    Error::InvalidInput(format!("variant {} requires a generator checkpoint", self.name()))
                })?;
                super_resolve(g, &downsample_bicubic(hr, 4)?, tiles)
            }
        }
    }

    /// Test-time input: the LR classifier sees downsampled test images,
    /// every other variant sees the original test images.
    pub fn test_input(self, hr: &Image) -> Result<Image> {
        match self {
            Variant::Lr => downsample_bicubic(hr, 4),
            _ => Ok(hr.clone()),
        }
    }
}

/// Write the variant's train/val images under `out_dir` and return the
/// derived manifest. Test entries keep pointing at the original files
/// (downsampled copies for the LR variant).
pub fn prepare_variant_dataset(
    manifest: &DatasetManifest,
    variant: Variant,
    generator: Option<&Generator>,
    tiles: &TileConfig,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if variant.needs_generator() && generator.is_none() {
        return Err(Error::InvalidInput(format!("variant {} requires a generator checkpoint", variant.name())));
    }
    let images_dir = out_dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let mut entries = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let src = manifest.resolve(entry);
        let hr = Image::load_png(&src)?;
        let out = match entry.split {
            Split::Test => variant.test_input(&hr)?,
            _ => variant.transform(&hr, generator, tiles)?,
        };
        let file_name = Path::new(&entry.path).file_name().and_then(|n| n.to_str()).unwrap_or("image.png");
        let rel = format!("images/{}_{}", entry.split.as_str(), file_name);
        if variant == Variant::Hr {
            std::fs::copy(&src, out_dir.join(&rel)).map_err(|e| Error::io(&src, e))?;
        } else {
            out.save_png(out_dir.join(&rel))?;
        }
        entries.push(ManifestEntry { path: rel, split: entry.split, label: entry.label.clone() });
    }
    let size = match variant {
        Variant::Lr => manifest.image_size / 4,
        _ => manifest.image_size,
    };
    let derived = DatasetManifest::new(out_dir, size, manifest.classes.clone(), entries);
    derived.save(out_dir.join("manifest.json"))?;
    Ok(derived)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    /// Only `"compact"` is built in.
    pub backbone: String,
    /// HR input side; the LR variant uses a quarter of it.
    pub input_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub cb_beta: f64,
    pub lr: f64,
    pub hflip: bool,
    pub vflip: bool,
    /// Output channels of the three convolution stages.
    pub channels: [usize; 3],
    /// Subtract each image's channel means and divide by its pixel standard
    /// deviation before the first convolution.
    pub standardize: bool,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            backbone: "compact".into(),
            input_size: 512,
            epochs: 20,
            batch_size: 16,
            cb_beta: 0.9999,
            lr: 1e-4,
            hflip: true,
            vflip: true,
            channels: [16, 32, 32],
            standardize: true,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.backbone != "compact" {
            problems.push(format!("classify.backbone {:?} is not available; use \"compact\"", self.backbone));
        }
        if self.input_size == 0 || self.input_size % 4 != 0 {
            problems.push(format!("classify.input_size must be a positive multiple of 4, got {}", self.input_size));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            problems.push("classify.epochs and classify.batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.cb_beta) {
            problems.push(format!("classify.cb_beta must lie in [0, 1), got {}", self.cb_beta));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            problems.push(format!("classify.lr must be positive, got {}", self.lr));
        }
        if self.channels.contains(&0) {
            problems.push("classify.channels must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems.join("; ")))
        }
    }
}

/// Zero channel means, unit pixel standard deviation.
pub fn standardize(img: &Image) -> Image {
    let (h, w, c) = img.dims();
    let n = (h * w) as f64;
    let mut mean = vec![0.0; c];
    for px in img.data().chunks(c) {
        for (m, v) in mean.iter_mut().zip(px) {
            *m += v / n;
        }
    }
    let mut out = img.clone();
    for px in out.data_mut().chunks_mut(c) {
        for (v, m) in px.iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    let var = out.data().iter().map(|v| v * v).sum::<f64>() / out.data().len().max(1) as f64;
    let inv = 1.0 / (var.sqrt() + 1e-6);
    out.data_mut().iter_mut().for_each(|v| *v *= inv);
    out
}

/// conv-lrelu-pool, conv-lrelu-pool, conv-lrelu, global average, linear.
#[derive(Clone, Debug)]
pub struct Classifier {
    params: ParamStore,
    convs: [Conv2d; 3],
    head: Linear,
    classes: Vec<String>,
    standardize: bool,
}

const SLOPE: f64 = 0.1;

impl Classifier {
    pub fn new(channels: [usize; 3], classes: Vec<String>, seed: u64) -> Self {
        let mut params = ParamStore::new();
        let mut init = Init::new(seed);
        let c1 = Conv2d::new(&mut params, &mut init, "conv1", 3, channels[0], 3, 1, 1.0);
        let c2 = Conv2d::new(&mut params, &mut init, "conv2", channels[0], channels[1], 3, 1, 1.0);
        let c3 = Conv2d::new(&mut params, &mut init, "conv3", channels[1], channels[2], 3, 1, 1.0);
        let head = Linear::new(&mut params, &mut init, "head", channels[2], classes.len());
        Self { params, convs: [c1, c2, c3], head, classes, standardize: false }
    }

    pub fn with_standardize(mut self, on: bool) -> Self {
        self.standardize = on;
        self
    }

    fn batch(&self, images: &[Image]) -> Result<Tensor> {
        if self.standardize {
            images_to_batch(&images.iter().map(standardize).collect::<Vec<_>>())
        } else {
            images_to_batch(images)
        }
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    fn logits<'g>(&self, p: &crate::nn::Bound<'g>, x: crate::autograd::Var<'g>) -> crate::autograd::Var<'g> {
        let [c1, c2, c3] = &self.convs;
        let h = c1.forward(p, x).leaky_relu(SLOPE).avg_pool2();
        let h = c2.forward(p, h).leaky_relu(SLOPE).avg_pool2();
        let h = c3.forward(p, h).leaky_relu(SLOPE).global_avg_pool();
        self.head.forward(p, h.flatten())
    }

    pub fn predict(&self, images: &[Image]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(32) {
            let graph = Graph::new();
            let p = self.params.bind(&graph, false);
            let logits = self.logits(&p, graph.constant(self.batch(chunk)?)).value();
            let k = self.classes.len();
            for row in logits.data().chunks(k) {
                let best = (0..k).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                out.push(best);
            }
        }
        Ok(out)
    }
}

/// Per-class, micro and macro accuracy with the confusion matrix
/// (rows = true class, columns = prediction).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub classes: Vec<String>,
    /// `None` for classes absent from the split.
    pub per_class: Vec<Option<f64>>,
    pub micro: f64,
    pub macro_avg: f64,
    pub confusion: Vec<Vec<usize>>,
}

impl AccuracyTable {
    pub fn from_predictions(classes: &[String], truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::ShapeMismatch("truth and prediction lengths differ".into()));
        }
        let k = classes.len();
        let mut confusion = vec![vec![0usize; k]; k];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= k || p >= k {
                return Err(Error::InvalidInput(format!("label out of range for {k} classes")));
            }
            confusion[t][p] += 1;
        }
        Ok(Self::from_confusion(classes.to_vec(), confusion))
    }

    pub fn from_confusion(classes: Vec<String>, confusion: Vec<Vec<usize>>) -> Self {
        let per_class: Vec<Option<f64>> = confusion
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let n: usize = row.iter().sum();
                (n > 0).then(|| row[i] as f64 / n as f64)
            })
            .collect();
        let total: usize = confusion.iter().flatten().sum();
        let correct: usize = (0..confusion.len()).map(|i| confusion[i][i]).sum();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let micro = if total > 0 { correct as f64 / total as f64 } else { 0.0 };
        let macro_avg = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
        Self { classes, per_class, micro, macro_avg, confusion }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub train_micro: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedReport {
    pub variant: String,
    pub class_weights: Vec<f64>,
    pub epochs: Vec<EpochLog>,
    pub train: AccuracyTable,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val: Option<AccuracyTable>,
}

/// Train with class-balanced softmax cross-entropy and random flips.
pub fn train_classifier(
    cfg: &ClassifierConfig,
    classes: &[String],
    train: (&[Image], &[usize]),
    val: Option<(&[Image], &[usize])>,
    seed: u64,
) -> Result<(Classifier, TrainedReport)> {
    cfg.validate()?;
    let (images, labels) = train;
    if images.len() != labels.len() || images.is_empty() {
        return Err(Error::InvalidInput("training images and labels must be non-empty and equal in number".into()));
    }
    let k = classes.len();
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidInput(format!("label {bad} outside the {k}-class set")));
    }
    let mut counts = vec![0usize; k];
    for &l in labels {
        counts[l] += 1;
    }
    let weights = class_balanced_weights(&counts, cfg.cb_beta)?;
    let mut model =
        Classifier::new(cfg.channels, classes.to_vec(), stream_rng(seed, &[30]).random()).with_standardize(cfg.standardize);
    let mut opt = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, &model.params);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = stream_rng(seed, &[31, epoch as u64]);
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut batches) = (0.0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Image> = chunk
                .iter()
                .map(|&i| {
                    let mut img = images[i].clone();
                    if cfg.hflip && rng.random_bool(0.5) {
                        img = img.flip_horizontal();
                    }
                    if cfg.vflip && rng.random_bool(0.5) {
                        img = img.flip_vertical();
                    }
                    img
                })
                .collect();
            let ys: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let ws: Vec<f64> = ys.iter().map(|&y| weights[y]).collect();
            let graph = Graph::new();
            let p = model.params.bind(&graph, true);
            let loss = model.logits(&p, graph.constant(model.batch(&batch)?)).softmax_cross_entropy(&ys, &ws, ys.len() as f64);
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { step: epoch as u64, detail: format!("classifier loss, batch {chunk:?}") });
            }
            let grads = graph.backward(loss);
            let grads = p.gradients(&grads);
            opt.update(&mut model.params, &grads);
            loss_sum += value;
            batches += 1;
        }
        let train_table = AccuracyTable::from_predictions(classes, labels, &model.predict(images)?)?;
        epochs.push(EpochLog { epoch, loss: loss_sum / batches as f64, train_micro: train_table.micro });
    }
    let train_table = AccuracyTable::from_predictions(classes, labels, &model.predict(images)?)?;
    let val_table = match val {
        Some((vi, vl)) => Some(evaluate_classifier(&model, vi, vl)?),
        None => None,
    };
    let report = TrainedReport { variant: String::new(), class_weights: weights, epochs, train: train_table, val: val_table };
    Ok((model, report))
}

pub fn evaluate_classifier(model: &Classifier, images: &[Image], labels: &[usize]) -> Result<AccuracyTable> {
    AccuracyTable::from_predictions(model.classes(), labels, &model.predict(images)?)
}

/// Everything the five-variant experiment reports for one variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: String,
    pub pipeline: String,
    pub training: TrainedReport,
    pub test: AccuracyTable,
}

/// Prepare, train and test one variant on in-memory splits.
pub fn run_variant(
    cfg: &ClassifierConfig,
    variant: Variant,
    generator: Option<&Generator>,
    tiles: &TileConfig,
    classes: &[String],
    splits: [(&[Image], &[usize]); 3],
    seed: u64,
) -> Result<VariantResult> {
    let [train, val, test] = splits;
    let map = |imgs: &[Image]| -> Result<Vec<Image>> { imgs.iter().map(|i| variant.transform(i, generator, tiles)).collect() };
    let train_x = map(train.0)?;
    let val_x = map(val.0)?;
    let test_x: Vec<Image> = test.0.iter().map(|i| variant.test_input(i)).collect::<Result<_>>()?;
    let val_arg = (!val_x.is_empty()).then_some((val_x.as_slice(), val.1));
    let (model, mut training) = train_classifier(cfg, classes, (&train_x, train.1), val_arg, seed)?;
    training.variant = variant.name().into();
    let test_table = evaluate_classifier(&model, &test_x, test.1)?;
    Ok(VariantResult { variant: variant.name().into(), pipeline: variant.pipeline().into(), training, test: test_table })
}

/// Nearest class-mean classifier on raw pixels, a separability reference.
pub fn nearest_centroid(train: (&[Image], &[usize]), k: usize, queries: &[Image]) -> Vec<usize> {
    let d = train.0.first().map_or(0, |i| i.data().len());
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (img, &l) in train.0.iter().zip(train.1) {
        counts[l] += 1;
        for (s, v) in sums[l].iter_mut().zip(img.data()) {
            *s += v;
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        s.iter_mut().for_each(|v| *v /= n.max(1) as f64);
    }
    queries
        .iter()
        .map(|q| {
            let dist = |c: &Vec<f64>| c.iter().zip(q.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            (0..k).filter(|&c| counts[c] > 0).min_by(|&a, &b| dist(&sums[a]).total_cmp(&dist(&sums[b]))).unwrap_or(0)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn beta_zero_is_uniform_and_singletons_are_one() {
        assert_eq!(class_balanced_weights(&[5, 100, 7], 0.0).unwrap(), vec![1.0; 3]);
        let w = class_balanced_weights(&[1, 1], 0.9).unwrap();
        assert_eq!(w, vec![1.0, 1.0]);
        assert!(class_balanced_weights(&[3, 0], 0.5).is_err());
        assert!(class_balanced_weights(&[3], 1.0).is_err());
    }

    #[test]
    fn constant_predictor_on_balanced_split() {
        let truth: Vec<usize> = (0..5).flat_map(|c| [c; 4]).collect();
        let t = AccuracyTable::from_predictions(&names(5), &truth, &[0; 20]).unwrap();
        assert!((t.micro - 0.2).abs() < 1e-12 && (t.macro_avg - 0.2).abs() < 1e-12);
        let perfect = AccuracyTable::from_predictions(&names(5), &truth, &truth).unwrap();
        assert_eq!((perfect.micro, perfect.macro_avg), (1.0, 1.0));
    }

    #[test]
    fn absent_class_is_excluded_from_macro() {
        let t = AccuracyTable::from_confusion(names(3), vec![vec![2, 0, 0], vec![0, 0, 0], vec![1, 0, 1]]);
        assert_eq!(t.per_class, vec![Some(1.0), None, Some(0.5)]);
        assert!((t.macro_avg - 0.75).abs() < 1e-12);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.name()).unwrap(), v);
            assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{}\"", v.name()));
        }
    }
}
