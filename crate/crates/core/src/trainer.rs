//! Adversarial training loop: one critic update then one generator update
//! per step, Adam on both, NDJSON logging and periodic checkpoints.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::arm::ArmConfig;
use crate::autograd::Graph;
use crate::checkpoint;
use crate::data::{stream_rng, BatchIterator, SrPair};
use crate::error::{Error, Result};
use crate::image::{images_to_batch, Image};
use crate::losses::{self, FeatureExtractor, LossBreakdown, LossConfig, LossWeights};
use crate::networks::{Discriminator, Generator, ModelConfig};
use crate::nn::{Adam, AdamConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// HR crop side; LR inputs are a quarter of it.
    pub patch_size: usize,
    pub adam_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    /// Leading steps that train G on the L1 term alone with D frozen.
    pub warmup_l1_steps: u64,
    /// Generator learning rate during warmup; `adam_lr` when unset.
    pub warmup_adam_lr: Option<f64>,
    /// Leading steps during which the artifact term is logged but unweighted.
    pub arm_delay_steps: u64,
    /// Hard cap on the total step count; 0 means epochs × batches.
    pub max_steps: u64,
    /// Checkpoint period in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    /// Random flips and quarter turns of every crop.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 400,
            batch_size: 32,
            patch_size: 192,
            adam_lr: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            warmup_l1_steps: 0,
            warmup_adam_lr: None,
            arm_delay_steps: 0,
            max_steps: 0,
            checkpoint_every: 0,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.adam_lr, beta1: self.adam_beta1, beta2: self.adam_beta2, ..AdamConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.epochs == 0 {
            problems.push("train.epochs must be positive".to_string());
        }
        if self.batch_size == 0 {
            problems.push("train.batch_size must be positive".to_string());
        }
        if self.patch_size == 0 || self.patch_size % 4 != 0 {
            problems.push(format!("train.patch_size must be a positive multiple of 4, got {}", self.patch_size));
        }
        if !(self.adam_lr > 0.0 && self.adam_lr.is_finite()) {
            problems.push(format!("train.adam_lr must be positive, got {}", self.adam_lr));
        }
        if let Some(lr) = self.warmup_adam_lr.filter(|lr| !(*lr > 0.0 && lr.is_finite())) {
            problems.push(format!("train.warmup_adam_lr must be positive, got {lr}"));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                problems.push(format!("train.{name} must lie in [0, 1), got {b}"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems.join("; ")))
        }
    }
}

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSetup {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub arm: ArmConfig,
}

impl Default for TrainSetup {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            arm: ArmConfig::default(),
        }
    }
}

impl TrainSetup {
    /// Tiny networks, small crops and a short schedule.
    pub fn desk(patch_size: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            seed,
            model: ModelConfig::tiny(patch_size),
            train: TrainConfig { patch_size, batch_size, ..TrainConfig::default() },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        self.arm.validate()?;
        if self.model.discriminator.input_size != self.train.patch_size {
            return Err(Error::InvalidConfig(format!(
                "model.discriminator.input_size ({}) must equal train.patch_size ({})",
                self.model.discriminator.input_size, self.train.patch_size
            )));
        }
        Ok(())
    }
}

/// Trainable state of both networks plus optimizer moments and counters.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub setup: TrainSetup,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub g_opt: Adam,
    pub d_opt: Adam,
    /// Completed steps.
    pub step: u64,
    pub epoch: u64,
    pub last: Option<LossBreakdown>,
}

impl TrainState {
    pub fn new(setup: TrainSetup) -> Result<Self> {
        setup.validate()?;
        let mut rng = stream_rng(setup.seed, &[0]);
        let generator = Generator::new(setup.model.generator.clone(), rng.next_u64())?;
        let discriminator = Discriminator::new(setup.model.discriminator.clone(), rng.next_u64())?;
        let g_opt = Adam::new(setup.train.adam(), generator.params());
        let d_opt = Adam::new(setup.train.adam(), discriminator.params());
        Ok(Self { setup, generator, discriminator, g_opt, d_opt, step: 0, epoch: 0, last: None })
    }

    /// Total number of steps for a corpus of `n_images`.
    pub fn planned_steps(&self, n_images: usize) -> u64 {
        let t = &self.setup.train;
        let full = (t.epochs * (n_images / t.batch_size)) as u64;
        if t.max_steps > 0 {
            full.min(t.max_steps)
        } else {
            full
        }
    }

    fn effective_weights(&self) -> LossWeights {
        let mut w = self.setup.loss.weights();
        if self.step < self.setup.train.arm_delay_steps {
            w.beta_arm = 0.0;
        }
        w
    }

    fn in_warmup(&self) -> bool {
        self.step < self.setup.train.warmup_l1_steps
    }
}

/// One logged step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub adv_g: f64,
    pub percep: f64,
    pub l1: f64,
    pub arm: f64,
    pub adv_d: f64,
    pub total: f64,
    pub wall_ms: f64,
}

impl StepRecord {
    fn new(step: u64, epoch: u64, b: &LossBreakdown, wall_ms: f64) -> Self {
        Self { step, epoch, adv_g: b.adv_g, percep: b.percep, l1: b.l1, arm: b.arm, adv_d: b.adv_d, total: b.total, wall_ms }
    }

    /// Same record without the timing field, for determinism comparisons.
    pub fn losses(&self) -> [f64; 6] {
        [self.adv_g, self.percep, self.l1, self.arm, self.adv_d, self.total]
    }
}

fn batch_tensors(batch: &[SrPair]) -> Result<(crate::Tensor, crate::Tensor)> {
    let lr: Vec<Image> = batch.iter().map(|p| p.lr.clone()).collect();
    let hr: Vec<Image> = batch.iter().map(|p| p.hr.clone()).collect();
    Ok((images_to_batch(&lr)?, images_to_batch(&hr)?))
}

fn non_finite(step: u64, what: &str, ids: Option<&[usize]>) -> Error {
    let detail = match ids {
        Some(ids) => format!("{what} is not finite; batch image indices {ids:?}"),
        None => format!("{what} is not finite"),
    };
    Error::NonFiniteLoss { step, detail }
}

/// One optimization step: G forward, D update against the detached SR
/// output, then the G update with fresh critic logits. During warmup only
/// the weighted L1 term trains G and D is left untouched.
pub fn train_step(state: &mut TrainState, batch: &[SrPair], fx: &dyn FeatureExtractor) -> Result<LossBreakdown> {
    train_step_with_ids(state, batch, fx, None)
}

fn train_step_with_ids(
    state: &mut TrainState,
    batch: &[SrPair],
    fx: &dyn FeatureExtractor,
    ids: Option<&[usize]>,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let (lr, hr) = batch_tensors(batch)?;
    let step = state.step + 1;
    let weights = state.effective_weights();

    let t = &state.setup.train;
    state.g_opt.config = t.adam();
    state.d_opt.config = t.adam();
    if state.in_warmup() {
        state.g_opt.config.lr = t.warmup_adam_lr.unwrap_or(t.adam_lr);
    }

    let graph = Graph::new();
    let gp = state.generator.params().bind(&graph, true);
    let sr = state.generator.forward(&gp, graph.constant(lr))?;

    let breakdown;
    let total;
    if state.in_warmup() {
        let hr_var = graph.constant(hr);
        let l1 = losses::l1_loss_var(sr, hr_var);
        total = l1.scale(weights.eta_l1);
        let warm = LossWeights { lambda_adv: 0.0, eta_l1: weights.eta_l1, beta_arm: 0.0 };
        breakdown = LossBreakdown { adv_g: 0.0, percep: 0.0, l1: l1.item(), arm: 0.0, adv_d: 0.0, total: total.item(), weights: warm };
    } else {
        // Critic update on the detached generator output.
        let adv_d = {
            let dg = Graph::new();
            let dp = state.discriminator.params().bind(&dg, true);
            let real = state.discriminator.forward(&dp, dg.constant(hr.clone()))?;
            let fake = state.discriminator.forward(&dp, dg.constant((*sr.value()).clone()))?;
            let loss = losses::discriminator_loss_var(real, fake);
            let value = loss.item();
            if !value.is_finite() {
                return Err(non_finite(step, "discriminator loss", ids));
            }
            let grads = dg.backward(loss);
            let grads = dp.gradients(&grads);
            state.d_opt.update(state.discriminator.params_mut(), &grads);
            value
        };
        let dp = state.discriminator.params().bind(&graph, false);
        let real = state.discriminator.forward(&dp, graph.constant(hr.clone()))?;
        let fake = state.discriminator.forward(&dp, sr)?;
        let objective = losses::total_generator_loss(sr, &hr, real, fake, &weights, &state.setup.arm, fx)?;
        total = objective.total;
        breakdown = LossBreakdown { adv_d, ..objective.breakdown };
    }
    if !breakdown.is_finite() {
        return Err(non_finite(step, "generator loss", ids));
    }
    let grads = graph.backward(total);
    let grads = gp.gradients(&grads);
    state.g_opt.update(state.generator.params_mut(), &grads);
    state.step = step;
    state.last = Some(breakdown.clone());
    Ok(breakdown)
}

/// Where [`train`] writes its outputs and when it stops early.
#[derive(Default)]
pub struct RunOptions<'a> {
    pub checkpoint_dir: Option<PathBuf>,
    pub log: Option<&'a mut dyn Write>,
    /// Stop once this many steps are complete (simulated interruption).
    pub stop_at: Option<u64>,
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step-{step:08}.ckpt"))
}

/// Newest `step-*.ckpt` in `dir`, if any.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    let entries = match std::fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(Error::io(dir, e)),
    };
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let step = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("step-")?.strip_suffix(".ckpt")?.parse::<u64>().ok());
        if let Some(step) = step {
            if best.as_ref().is_none_or(|(s, _)| step > *s) {
                best = Some((step, path));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

/// Run steps from `state.step` to the planned total over `images`.
pub fn train(
    state: &mut TrainState,
    images: &[Image],
    fx: &dyn FeatureExtractor,
    mut opts: RunOptions<'_>,
) -> Result<Vec<StepRecord>> {
    let t = state.setup.train.clone();
    let batches = BatchIterator::new(images, t.batch_size, t.patch_size, state.setup.seed)?.with_augmentation(t.augment);
    let total = state.planned_steps(images.len());
    let end = opts.stop_at.map_or(total, |s| s.min(total));
    if let Some(dir) = &opts.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let per_epoch = batches.batches_per_epoch() as u64;
    let mut records = Vec::new();
    while state.step < end {
        let started = Instant::now();
        let (epoch, pairs) = batches.batch_at(state.step)?;
        let ids = batches.batch_indices(epoch, (state.step % per_epoch) as usize);
        let breakdown = train_step_with_ids(state, &pairs, fx, Some(&ids))?;
        state.epoch = epoch;
        let record = StepRecord::new(state.step, epoch, &breakdown, started.elapsed().as_secs_f64() * 1e3);
        if let Some(log) = opts.log.as_deref_mut() {
            let line = serde_json::to_string(&record)?;
            writeln!(log, "{line}").map_err(|e| Error::io("<log>", e))?;
        }
        records.push(record);
        if let Some(dir) = &opts.checkpoint_dir {
            let periodic = t.checkpoint_every > 0 && state.step % t.checkpoint_every == 0;
            if periodic || state.step == end {
                checkpoint::save(state, &checkpoint_path(dir, state.step))?;
            }
        }
    }
    Ok(records)
}
