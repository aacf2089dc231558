//! Masked self-pretraining and finetuning.
//!
//! Pretraining reconstructs LDCT images from copies with most of their
//! patches zeroed, with both long shortcuts removed. The weights then move to
//! a model with the shortcuts reconnected, which is finetuned from LDCT to
//! NDCT.

use std::fmt;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::losses::{self, LossConfig, SsimParams};
use crate::optim::{AdamConfig, LrSchedule, Optimizer};
use crate::par;
use crate::seed::derive_path;
use crate::sim::PairedSample;
use crate::swin::{ModelConfig, Shortcuts, SwinDenoiser};
use crate::tensor::Tensor;

/// Value written into masked pixels.
pub const MASK_FILL: f64 = 0.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskConfig {
    pub patch_size: usize,
    pub rate: f64,
    /// Restrict the pretraining loss to masked pixels.
    pub masked_only: bool,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            patch_size: 8,
            rate: 0.75,
            masked_only: true,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 {
            return Err(Error::Config("mask patch size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(Error::Config(format!("mask rate {} must lie in [0, 1]", self.rate)));
        }
        Ok(())
    }
}

/// Number of masked patches out of `total` at `rate`, rounding ties to even.
pub fn mask_count(total: usize, rate: f64) -> usize {
    ((rate * total as f64).round_ties_even() as usize).min(total)
}

/// Boolean grid over the non-overlapping `patch_size` patches of an image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchMask {
    grid: (usize, usize),
    patch_size: usize,
    rate_bits: u64,
    seed: u64,
    masked: Vec<bool>,
}

impl PatchMask {
    /// Grid from explicit patch flags, row-major.
    pub fn from_grid(grid: (usize, usize), patch_size: usize, masked: Vec<bool>) -> Result<Self> {
        if patch_size == 0 || grid.0 == 0 || grid.1 == 0 || masked.len() != grid.0 * grid.1 {
            return Err(Error::invalid(
                "PatchMask",
                format!("{} flags for a {}x{} grid", masked.len(), grid.0, grid.1),
            ));
        }
        let rate = masked.iter().filter(|&&m| m).count() as f64 / masked.len() as f64;
        Ok(PatchMask {
            grid,
            patch_size,
            rate_bits: rate.to_bits(),
            seed: 0,
            masked,
        })
    }

    /// Patch rows and columns.
    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn rate(&self) -> f64 {
        f64::from_bits(self.rate_bits)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Image size the mask covers.
    pub fn image_dims(&self) -> (usize, usize) {
        (self.grid.0 * self.patch_size, self.grid.1 * self.patch_size)
    }

    pub fn is_masked(&self, row: usize, col: usize) -> bool {
        self.masked[row * self.grid.1 + col]
    }

    pub fn flags(&self) -> &[bool] {
        &self.masked
    }

    pub fn total(&self) -> usize {
        self.masked.len()
    }

    pub fn count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    /// `[h, w]` image with 1 on masked pixels and 0 elsewhere.
    pub fn pixel_mask(&self) -> Tensor {
        let (h, w) = self.image_dims();
        let p = self.patch_size;
        Tensor::from_fn(&[h, w], |k| {
            let (i, j) = (k / w, k % w);
            if self.is_masked(i / p, j / p) {
                1.0
            } else {
                0.0
            }
        })
    }
}

/// Mask exactly `mask_count(N, rate)` patches, chosen uniformly from `seed`.
pub fn generate_mask(h: usize, w: usize, patch_size: usize, rate: f64, seed: u64) -> Result<PatchMask> {
    MaskConfig {
        patch_size,
        rate,
        masked_only: true,
    }
    .validate()?;
    if h == 0 || w == 0 || !h.is_multiple_of(patch_size) || !w.is_multiple_of(patch_size) {
        return Err(Error::Config(format!(
            "image {h}x{w} is not divisible into {patch_size}x{patch_size} patches"
        )));
    }
    let grid = (h / patch_size, w / patch_size);
    let total = grid.0 * grid.1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masked = vec![false; total];
    for i in rand::seq::index::sample(&mut rng, total, mask_count(total, rate)) {
        masked[i] = true;
    }
    Ok(PatchMask {
        grid,
        patch_size,
        rate_bits: rate.to_bits(),
        seed,
        masked,
    })
}

/// Zero the masked patches of an `[h, w]` image or every image of a
/// `[b, h, w, 1]` batch.
pub fn apply_mask(image: &Tensor, mask: &PatchMask) -> Result<Tensor> {
    let (h, w) = image_hw("apply_mask", image)?;
    if (h, w) != mask.image_dims() {
        let (mh, mw) = mask.image_dims();
        return Err(Error::shape("apply_mask", image.shape(), &[mh, mw]));
    }
    let p = mask.patch_size;
    let mut out = image.clone();
    for (k, v) in out.data_mut().iter_mut().enumerate() {
        let (i, j) = ((k / w) % h, k % w);
        if mask.is_masked(i / p, j / p) {
            *v = MASK_FILL;
        }
    }
    Ok(out)
}

fn image_hw(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [h, w] | [_, h, w, 1] => Ok((h, w)),
        _ => Err(Error::invalid(op, format!("expected [h, w] or [b, h, w, 1], got {:?}", t.shape()))),
    }
}

/// Stack `[h, w]` images into a `[b, h, w, 1]` batch.
pub fn stack_images(images: &[&Tensor]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Data("cannot batch zero images".into()))?;
    let [h, w] = *first.shape() else {
        return Err(Error::invalid("stack_images", format!("expected [h, w], got {:?}", first.shape())));
    };
    let mut data = Vec::with_capacity(images.len() * h * w);
    for im in images {
        if im.shape() != [h, w] {
            return Err(Error::Data(format!(
                "images in one batch differ in size: {:?} vs {:?}",
                im.shape(),
                [h, w]
            )));
        }
        data.extend_from_slice(im.data());
    }
    Tensor::new(&[images.len(), h, w, 1], data)
}

fn as_batch(t: &Tensor) -> Result<Tensor> {
    match *t.shape() {
        [h, w] => t.reshape(&[1, h, w, 1]),
        [_, _, _, 1] => Ok(t.clone()),
        _ => Err(Error::invalid("batch", format!("expected [h, w] or [b, h, w, 1], got {:?}", t.shape()))),
    }
}

/// Loss value and prediction of one optimization step.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub loss: f64,
    pub lr: f64,
    pub prediction: Tensor,
}

fn train_step(
    model: &mut SwinDenoiser,
    input: &Tensor,
    target: &Tensor,
    pixel_mask: Option<&Tensor>,
    opt: &mut Optimizer,
    loss_cfg: &LossConfig,
) -> Result<StepOutput> {
    let g = Graph::new();
    let bound = model.params().bind(&g);
    let pred = model.forward_var(&bound, g.constant(input.clone()))?;
    let loss = losses::combined_loss(pred, target, loss_cfg, pixel_mask)?;
    let value = loss.value().item()?;
    if !value.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    let grads = g.backward(loss)?;
    model.params_mut().set_grads(&bound, &grads);
    let lr = opt.step(model.params_mut())?;
    model.params_mut().clear_grads();
    Ok(StepOutput {
        loss: value,
        lr,
        prediction: pred.value().as_ref().clone(),
    })
}

/// One masked-reconstruction step on an `[h, w]` image or `[b, h, w, 1]`
/// batch; the same mask is applied to every image of the batch.
pub fn pretrain_step_full(
    model: &mut SwinDenoiser,
    ldct: &Tensor,
    mask: &PatchMask,
    opt: &mut Optimizer,
    loss_cfg: &LossConfig,
    masked_only: bool,
) -> Result<StepOutput> {
    if model.shortcuts().any() {
        return Err(Error::Config("pretraining requires both long shortcuts to be disabled".into()));
    }
    let target = as_batch(ldct)?;
    let input = apply_mask(&target, mask)?;
    let region = if masked_only {
        let m = mask.pixel_mask();
        let b = target.shape()[0];
        let tiled: Vec<f64> = (0..b).flat_map(|_| m.data().iter().copied()).collect();
        Some(Tensor::new(target.shape(), tiled)?)
    } else {
        None
    };
    train_step(model, &input, &target, region.as_ref(), opt, loss_cfg)
}

/// [`pretrain_step_full`] returning the loss only, with the loss restricted to
/// masked pixels.
pub fn pretrain_step(
    model: &mut SwinDenoiser,
    ldct: &Tensor,
    mask: &PatchMask,
    opt: &mut Optimizer,
    loss_cfg: &LossConfig,
) -> Result<f64> {
    Ok(pretrain_step_full(model, ldct, mask, opt, loss_cfg, true)?.loss)
}

/// One LDCT -> NDCT step with the full-image combined loss.
pub fn finetune_step_full(
    model: &mut SwinDenoiser,
    ldct: &Tensor,
    ndct: &Tensor,
    opt: &mut Optimizer,
    loss_cfg: &LossConfig,
) -> Result<StepOutput> {
    if model.shortcuts() != Shortcuts::ON {
        return Err(Error::Config("finetuning requires both long shortcuts to be enabled".into()));
    }
    if ldct.shape() != ndct.shape() {
        return Err(Error::Data(format!(
            "unpaired input: ldct {:?} vs ndct {:?}",
            ldct.shape(),
            ndct.shape()
        )));
    }
    let (input, target) = (as_batch(ldct)?, as_batch(ndct)?);
    train_step(model, &input, &target, None, opt, loss_cfg)
}

pub fn finetune_step(
    model: &mut SwinDenoiser,
    ldct: &Tensor,
    ndct: &Tensor,
    opt: &mut Optimizer,
    loss_cfg: &LossConfig,
) -> Result<f64> {
    Ok(finetune_step_full(model, ldct, ndct, opt, loss_cfg)?.loss)
}

/// Load pretrained weights into `model` and reconnect both shortcuts.
pub fn transfer_weights(pretrained: &Checkpoint, model: SwinDenoiser) -> Result<SwinDenoiser> {
    let (a, b) = (&pretrained.config, model.config());
    if !a.same_architecture(b) {
        return Err(Error::Config(format!(
            "checkpoint architecture differs from the model: {}",
            architecture_diff(a, b).join(", ")
        )));
    }
    let mut missing = Vec::new();
    for name in model.params().names() {
        match pretrained.get(name) {
            None => missing.push(name.to_string()),
            Some(t) if t.shape != model.params().get(name).expect("listed").value.shape() => {
                return Err(Error::Checkpoint(format!("tensor `{name}` has shape {:?}", t.shape)));
            }
            Some(_) => {}
        }
    }
    if !missing.is_empty() {
        return Err(Error::Checkpoint(format!("checkpoint lacks tensors: {}", missing.join(", "))));
    }
    let extra: Vec<&str> = pretrained
        .tensors
        .iter()
        .map(|t| t.name.as_str())
        .filter(|n| model.params().get(n).is_none())
        .collect();
    if !extra.is_empty() {
        return Err(Error::Checkpoint(format!("checkpoint has unknown tensors: {}", extra.join(", "))));
    }
    let mut model = model;
    for p in model.params_mut().iter_mut() {
        let t = pretrained.get(&p.name).expect("checked");
        for (dst, &src) in p.value.data_mut().iter_mut().zip(&t.data) {
            *dst = src as f64;
        }
        p.grad = None;
    }
    model.set_shortcuts(Shortcuts::ON);
    Ok(model)
}

fn architecture_diff(a: &ModelConfig, b: &ModelConfig) -> Vec<String> {
    let mut d = Vec::new();
    let mut check = |name: &str, x: String, y: String| {
        if x != y {
            d.push(format!("{name} {x} vs {y}"));
        }
    };
    check("window_size", a.window_size.to_string(), b.window_size.to_string());
    check("depths", format!("{:?}", a.depths), format!("{:?}", b.depths));
    check("embed_dim", a.embed_dim.to_string(), b.embed_dim.to_string());
    check("num_heads", a.num_heads.to_string(), b.num_heads.to_string());
    check("mlp_ratio", a.mlp_ratio.to_string(), b.mlp_ratio.to_string());
    check("rel_pos_bias", a.rel_pos_bias.to_string(), b.rel_pos_bias.to_string());
    d
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Stage::Pretrain => 1,
            Stage::Finetune => 2,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainPlan {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
    pub loss: LossConfig,
    pub mask: MaskConfig,
    /// Drives shuffling and mask sampling.
    pub seed: u64,
}

impl TrainPlan {
    pub fn new(stage: Stage) -> Self {
        TrainPlan {
            stage,
            epochs: 50,
            batch_size: 1,
            schedule: LrSchedule::default(),
            adam: AdamConfig::default(),
            loss: LossConfig::default(),
            mask: MaskConfig::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        self.schedule.validate()?;
        self.loss.validate()?;
        self.mask.validate()
    }

    /// Iterations per epoch over `n` items.
    pub fn iters_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

/// One CSV log line. Validation rows carry no loss.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub stage: String,
    pub epoch: usize,
    pub iter: usize,
    pub lr: f64,
    pub loss: Option<f64>,
    pub ssim: f64,
    pub rmse: f64,
}

pub const LOG_HEADER: &str = "stage,epoch,iter,lr,loss,ssim,rmse";

impl fmt::Display for LogRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{},", self.stage, self.epoch, self.iter, self.lr)?;
        if let Some(l) = self.loss {
            write!(f, "{l}")?;
        }
        write!(f, ",{},{}", self.ssim, self.rmse)
    }
}

pub fn write_log<W: Write>(out: &mut W, rows: &[LogRow]) -> std::io::Result<()> {
    writeln!(out, "{LOG_HEADER}")?;
    for r in rows {
        writeln!(out, "{r}")?;
    }
    Ok(())
}

/// Training examples for one stage.
#[derive(Clone, Copy, Debug)]
pub enum StageData<'a> {
    /// LDCT images only; the pretraining target is the input itself.
    Unlabeled(&'a [&'a Tensor]),
    Paired(&'a [PairedSample]),
}

impl StageData<'_> {
    pub fn len(&self) -> usize {
        match self {
            StageData::Unlabeled(v) => v.len(),
            StageData::Paired(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Train `model` for `plan.epochs` epochs. Each epoch visits the data in a
/// seeded random order; finetuning evaluates `validation` after every epoch.
pub fn run_stage(
    model: &mut SwinDenoiser,
    plan: &TrainPlan,
    data: StageData<'_>,
    validation: &[PairedSample],
) -> Result<Vec<LogRow>> {
    plan.validate()?;
    if data.is_empty() {
        return Err(Error::Data(format!("{} stage has no training images", plan.stage)));
    }
    match (plan.stage, &data) {
        (Stage::Finetune, StageData::Unlabeled(_)) => {
            return Err(Error::Data("finetuning needs paired LDCT/NDCT data".into()))
        }
        (Stage::Pretrain, _) if model.shortcuts().any() => {
            return Err(Error::Config("pretraining requires both long shortcuts to be disabled".into()))
        }
        (Stage::Finetune, _) if model.shortcuts() != Shortcuts::ON => {
            return Err(Error::Config("finetuning requires both long shortcuts to be enabled".into()))
        }
        _ => {}
    }
    let mut opt = Optimizer::new(model.params(), plan.adam, plan.schedule);
    let ssim_p = plan.loss.ssim;
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut iter = 0usize;
    for epoch in 0..plan.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_path(plan.seed, &[plan.stage.tag(), epoch as u64]));
        order.shuffle(&mut rng);
        for batch in order.chunks(plan.batch_size) {
            let (out, target) = match data {
                StageData::Unlabeled(images) => {
                    let imgs: Vec<&Tensor> = batch.iter().map(|&i| images[i]).collect();
                    pretrain_batch(model, plan, &imgs, iter, epoch, &mut opt)?
                }
                StageData::Paired(pairs) => {
                    let ldct: Vec<&Tensor> = batch.iter().map(|&i| &pairs[i].ldct).collect();
                    if plan.stage == Stage::Pretrain {
                        pretrain_batch(model, plan, &ldct, iter, epoch, &mut opt)?
                    } else {
                        let ndct: Vec<&Tensor> = batch.iter().map(|&i| &pairs[i].ndct).collect();
                        let (x, y) = (stack_images(&ldct)?, stack_images(&ndct)?);
                        if x.shape() != y.shape() {
                            return Err(Error::Data("unpaired input".into()));
                        }
                        (finetune_step_full(model, &x, &y, &mut opt, &plan.loss)?, y)
                    }
                }
            };
            log.push(LogRow {
                stage: plan.stage.as_str().into(),
                epoch,
                iter,
                lr: out.lr,
                loss: Some(out.loss),
                ssim: losses::ssim(&out.prediction, &target, &ssim_p)?,
                rmse: losses::rmse(&out.prediction, &target)?,
            });
            iter += 1;
        }
        if plan.stage == Stage::Finetune && !validation.is_empty() {
            let m = evaluate(model, validation, &ssim_p)?;
            let s = summarize(&m);
            log.push(LogRow {
                stage: format!("{}_val", plan.stage),
                epoch,
                iter,
                lr: opt.lr(),
                loss: None,
                ssim: s.ssim.0,
                rmse: s.rmse.0,
            });
        }
    }
    Ok(log)
}

fn pretrain_batch(
    model: &mut SwinDenoiser,
    plan: &TrainPlan,
    images: &[&Tensor],
    iter: usize,
    epoch: usize,
    opt: &mut Optimizer,
) -> Result<(StepOutput, Tensor)> {
    let x = stack_images(images)?;
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let seed = derive_path(plan.seed, &[plan.stage.tag(), epoch as u64, iter as u64, 0x6d61736b]);
    let mask = generate_mask(h, w, plan.mask.patch_size, plan.mask.rate, seed)?;
    let out = pretrain_step_full(model, &x, &mask, opt, &plan.loss, plan.mask.masked_only)?;
    Ok((out, x))
}

/// Per-image quality of a model's output and of the raw LDCT input.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageMetrics {
    pub id: String,
    pub ssim: f64,
    pub rmse: f64,
    pub ldct_ssim: f64,
    pub ldct_rmse: f64,
}

/// Denoise one `[h, w]` image.
pub fn denoise(model: &SwinDenoiser, ldct: &Tensor) -> Result<Tensor> {
    let (h, w) = match *ldct.shape() {
        [h, w] => (h, w),
        _ => return Err(Error::invalid("denoise", format!("expected [h, w], got {:?}", ldct.shape()))),
    };
    model.forward(&ldct.reshape(&[1, h, w, 1])?)?.reshape(&[h, w])
}

/// Metrics for every pair, computed in parallel over images.
pub fn evaluate(model: &SwinDenoiser, pairs: &[PairedSample], p: &SsimParams) -> Result<Vec<ImageMetrics>> {
    par::map(pairs, |s| {
        if s.ldct.shape() != s.ndct.shape() {
            return Err(Error::Data(format!("pair `{}` has mismatched image sizes", s.id)));
        }
        let out = denoise(model, &s.ldct)?;
        if !out.is_finite() {
            return Err(Error::NonFinite("model output"));
        }
        Ok(ImageMetrics {
            id: s.id.clone(),
            ssim: losses::ssim(&out, &s.ndct, p)?,
            rmse: losses::rmse(&out, &s.ndct)?,
            ldct_ssim: losses::ssim(&s.ldct, &s.ndct, p)?,
            ldct_rmse: losses::rmse(&s.ldct, &s.ndct)?,
        })
    })
    .into_iter()
    .collect()
}

/// Mean and sample standard deviation of each metric.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricSummary {
    pub ssim: (f64, f64),
    pub rmse: (f64, f64),
    pub ldct_ssim: (f64, f64),
    pub ldct_rmse: (f64, f64),
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn summarize(m: &[ImageMetrics]) -> MetricSummary {
    let col = |f: fn(&ImageMetrics) -> f64| mean_std(&m.iter().map(f).collect::<Vec<_>>());
    MetricSummary {
        ssim: col(|x| x.ssim),
        rmse: col(|x| x.rmse),
        ldct_ssim: col(|x| x.ldct_ssim),
        ldct_rmse: col(|x| x.ldct_rmse),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    /// Random init, finetune on labeled pairs.
    Baseline,
    /// Pretrain on labeled LDCT, then finetune on the same pairs.
    Supervised,
    /// Pretrain on labeled and unlabeled LDCT, finetune on labeled pairs.
    SemiSupervised,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolPlan {
    pub protocol: Protocol,
    pub model: ModelConfig,
    /// Seed of the initial weights, shared by every protocol.
    pub init_seed: u64,
    pub pretrain: TrainPlan,
    pub finetune: TrainPlan,
}

#[derive(Clone, Copy, Debug)]
pub struct ProtocolData<'a> {
    pub labeled: &'a [PairedSample],
    pub unlabeled: &'a [Tensor],
    pub validation: &'a [PairedSample],
}

#[derive(Clone, Debug)]
pub struct ProtocolOutcome {
    pub pretrained: Option<Checkpoint>,
    pub finetuned: Checkpoint,
    pub model: SwinDenoiser,
    pub log: Vec<LogRow>,
}

pub fn run_protocol(plan: &ProtocolPlan, data: ProtocolData<'_>) -> Result<ProtocolOutcome> {
    if data.labeled.is_empty() {
        return Err(Error::Data("finetuning set is empty".into()));
    }
    let mut cfg = plan.model.clone();
    let mut log = Vec::new();
    let (pretrained, mut model) = match plan.protocol {
        Protocol::Baseline => {
            cfg.shortcuts = Shortcuts::ON;
            (None, SwinDenoiser::new(cfg, plan.init_seed)?)
        }
        Protocol::Supervised | Protocol::SemiSupervised => {
            cfg.shortcuts = Shortcuts::OFF;
            let mut model = SwinDenoiser::new(cfg, plan.init_seed)?;
            let mut images: Vec<&Tensor> = data.labeled.iter().map(|s| &s.ldct).collect();
            if plan.protocol == Protocol::SemiSupervised {
                images.extend(data.unlabeled.iter());
            }
            let pre = TrainPlan {
                stage: Stage::Pretrain,
                ..plan.pretrain
            };
            log.extend(run_stage(&mut model, &pre, StageData::Unlabeled(&images), &[])?);
            let ckpt = Checkpoint::from_model(&model);
            let transferred = transfer_weights(&ckpt, ckpt.to_model()?)?;
            (Some(ckpt), transferred)
        }
    };
    let fine = TrainPlan {
        stage: Stage::Finetune,
        ..plan.finetune
    };
    log.extend(run_stage(&mut model, &fine, StageData::Paired(data.labeled), data.validation)?);
    Ok(ProtocolOutcome {
        pretrained,
        finetuned: Checkpoint::from_model(&model),
        model,
        log,
    })
}
