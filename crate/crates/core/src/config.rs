//! Plain-text `key = value` run configuration.
//!
//! One pair per line, `#` starts a comment, blank lines are ignored. Unknown
//! and duplicate keys are errors.

use std::path::PathBuf;
use std::str::FromStr;

use crate::checkpoint::{model_config_from_kv, parse_size};
use crate::error::{Error, Result};
use crate::losses::{LossConfig, SsimParams};
use crate::mae::{MaskConfig, Stage, TrainPlan};
use crate::optim::{AdamConfig, LrSchedule};
use crate::sim::NoiseParams;
use crate::swin::ModelConfig;

/// Parsed key-value pairs, consumed key by key.
#[derive(Debug, Default)]
pub struct KvMap {
    entries: Vec<(String, String, bool)>,
}

pub fn parse_kv(text: &str) -> Result<KvMap> {
    let mut entries: Vec<(String, String, bool)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        if entries.iter().any(|(e, _, _)| e == k) {
            return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
        }
        entries.push((k.to_string(), v.to_string(), false));
    }
    Ok(KvMap { entries })
}

impl KvMap {
    pub fn take(&mut self, key: &str) -> Option<String> {
        self.entries
            .iter_mut()
            .find(|(k, _, used)| k == key && !*used)
            .map(|(_, v, used)| {
                *used = true;
                v.clone()
            })
    }

    pub fn take_parsed<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.take(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<T>()
                .map(Some)
                .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`"))),
        }
    }

    /// Keys not consumed yet.
    pub fn remaining(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, _, used)| !*used)
            .map(|(k, _, _)| k.clone())
            .collect()
    }
}

/// Everything a command-line run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub noise: NoiseParams,
    /// Pairs written by `simulate`.
    pub n_pairs: usize,
    pub data_dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
    /// Finetune on the first N pairs of `data_dir` only.
    pub labeled_limit: Option<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
    pub mask: MaskConfig,
    pub loss: LossConfig,
    /// Multiplier applied to reported RMSE values.
    pub rmse_scale: f64,
    pub log: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: ModelConfig::default(),
            noise: NoiseParams::default(),
            n_pairs: 50,
            data_dir: None,
            val_dir: None,
            labeled_limit: None,
            epochs: 50,
            batch_size: 1,
            schedule: LrSchedule::default(),
            adam: AdamConfig::default(),
            mask: MaskConfig::default(),
            loss: LossConfig::default(),
            rmse_scale: 1.0,
            log: None,
        }
    }
}

impl FromStr for RunConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut kv = parse_kv(text)?;
        let d = RunConfig::default();
        let model = model_config_from_kv(&mut kv, d.model.clone())?;
        let mut c = RunConfig { model, ..d };
        if let Some(v) = kv.take_parsed("seed")? {
            c.seed = v;
        }
        if let Some(v) = kv.take_parsed("n_pairs")? {
            c.n_pairs = v;
        }
        if let Some(v) = kv.take_parsed("sigma")? {
            c.noise.sigma = v;
        }
        if let Some(v) = kv.take_parsed("gain")? {
            c.noise.gain = v;
        }
        c.data_dir = kv.take("data_dir").map(PathBuf::from);
        c.val_dir = kv.take("val_dir").map(PathBuf::from);
        c.log = kv.take("log").map(PathBuf::from);
        c.labeled_limit = kv.take_parsed("labeled_limit")?;
        if let Some(v) = kv.take_parsed("epochs")? {
            c.epochs = v;
        }
        if let Some(v) = kv.take_parsed("batch_size")? {
            c.batch_size = v;
        }
        if let Some(v) = kv.take_parsed("lr")? {
            c.schedule.base_lr = v;
        }
        if let Some(v) = kv.take_parsed("lr_decay")? {
            c.schedule.decay_factor = v;
        }
        if let Some(v) = kv.take_parsed("lr_decay_every")? {
            c.schedule.decay_every = v;
        }
        if let Some(v) = kv.take_parsed("adam_beta1")? {
            c.adam.beta1 = v;
        }
        if let Some(v) = kv.take_parsed("adam_beta2")? {
            c.adam.beta2 = v;
        }
        if let Some(v) = kv.take_parsed("adam_eps")? {
            c.adam.eps = v;
        }
        if let Some(v) = kv.take_parsed("mask_patch")? {
            c.mask.patch_size = v;
        }
        if let Some(v) = kv.take_parsed("mask_rate")? {
            c.mask.rate = v;
        }
        if let Some(v) = kv.take("pretrain_loss") {
            c.mask.masked_only = match v.as_str() {
                "masked" => true,
                "full" => false,
                _ => return Err(Error::Config(format!("pretrain_loss must be `masked` or `full`, got `{v}`"))),
            };
        }
        if let Some(v) = kv.take_parsed("lambda_l1")? {
            c.loss.lambda_l1 = v;
        }
        if let Some(v) = kv.take_parsed("lambda_ssim")? {
            c.loss.lambda_ssim = v;
        }
        if let Some(v) = kv.take_parsed("ssim_window")? {
            c.loss.ssim.window_size = v;
        }
        if let Some(v) = kv.take_parsed("ssim_sigma")? {
            c.loss.ssim.sigma = v;
        }
        if let Some(v) = kv.take_parsed("rmse_scale")? {
            c.rmse_scale = v;
        }
        let unknown = kv.remaining();
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))));
        }
        c.validate()?;
        Ok(c)
    }
}

impl RunConfig {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        text.parse()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.noise.validate()?;
        self.schedule.validate()?;
        self.loss.validate()?;
        self.mask.validate()?;
        if self.n_pairs == 0 {
            return Err(Error::Config("n_pairs must be >= 1".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if self.labeled_limit == Some(0) {
            return Err(Error::Config("labeled_limit must be >= 1".into()));
        }
        let SsimParams { window_size, sigma, .. } = self.loss.ssim;
        if window_size == 0 || !(sigma > 0.0) {
            return Err(Error::Config("ssim window and sigma must be positive".into()));
        }
        if !(self.rmse_scale > 0.0) {
            return Err(Error::Config("rmse_scale must be positive".into()));
        }
        Ok(())
    }

    pub fn train_plan(&self, stage: Stage) -> TrainPlan {
        TrainPlan {
            stage,
            epochs: self.epochs,
            batch_size: self.batch_size,
            schedule: self.schedule,
            adam: self.adam,
            loss: self.loss,
            mask: self.mask,
            seed: self.seed,
        }
    }
}

/// Parse `"64"` / `"64x64"` style sizes.
pub fn parse_image_size(v: &str) -> Result<(usize, usize)> {
    parse_size(v)
}
