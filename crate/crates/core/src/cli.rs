//! `maect` command line.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::mae::{self, ImageMetrics, LogRow, Stage, StageData};
use crate::pgm::{self, DatasetItem};
use crate::sim::{self, PairedSample};
use crate::swin::{Shortcuts, SwinDenoiser};
use crate::tensor::Tensor;

#[derive(Debug, Parser)]
#[command(name = "maect", version, about = "Masked self-pretraining for a windowed-attention LDCT denoiser")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic NDCT/LDCT pairs and a manifest to the --out directory.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Masked-reconstruction pretraining on LDCT images, shortcuts removed.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Dataset directory; overrides `data_dir`.
        data: Option<PathBuf>,
    },
    /// LDCT -> NDCT training, from --init weights or a random start.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Pretrained checkpoint to transfer from.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Dataset directory; overrides `data_dir`.
        data: Option<PathBuf>,
    },
    /// Per-image and mean±std SSIM/RMSE of a checkpoint on a paired dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate.
        #[arg(long)]
        init: PathBuf,
        data: PathBuf,
    },
    /// Denoise one PGM image.
    Denoise {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to run.
        #[arg(long)]
        init: PathBuf,
        input: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    /// `key = value` run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }

    fn out(&self, what: &str) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::Config(format!("--out is required ({what})")))
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { common } => simulate(&common),
        Command::Pretrain { common, data } => pretrain(&common, data),
        Command::Finetune { common, init, data } => finetune(&common, init, data),
        Command::Eval { common, init, data } => eval(&common, &init, &data),
        Command::Denoise { common, init, input } => denoise(&common, &init, &input),
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => return Ok(()),
    };
    if !parent.is_dir() {
        return Err(Error::Config(format!("output directory {} does not exist", parent.display())));
    }
    Ok(())
}

fn existing(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(Error::Config(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

fn data_dir(cfg: &RunConfig, cli: Option<PathBuf>) -> Result<PathBuf> {
    let dir = cli
        .or_else(|| cfg.data_dir.clone())
        .ok_or_else(|| Error::Config("no dataset: pass a directory or set `data_dir`".into()))?;
    if !dir.is_dir() {
        return Err(Error::Config(format!("dataset directory {} does not exist", dir.display())));
    }
    Ok(dir)
}

fn log_path(cfg: &RunConfig, out: &Path) -> PathBuf {
    cfg.log.clone().unwrap_or_else(|| out.with_extension("log.csv"))
}

fn check_sizes(cfg: &RunConfig, images: &[&Tensor]) -> Result<()> {
    let ws = cfg.model.window_size;
    let p = cfg.mask.patch_size;
    let first = images[0].shape();
    for im in images {
        if im.shape() != first {
            return Err(Error::Data(format!("dataset mixes image sizes {:?} and {:?}", first, im.shape())));
        }
    }
    let (h, w) = (first[0], first[1]);
    if h % ws != 0 || w % ws != 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Data(format!(
            "image size {h}x{w} must be divisible by the window size {ws} and the mask patch size {p}"
        )));
    }
    Ok(())
}

fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut buf = Vec::new();
    mae::write_log(&mut buf, rows).map_err(|e| Error::io(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn simulate(common: &Common) -> Result<()> {
    let cfg = common.load()?;
    let out = common.out("dataset directory")?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let (h, w) = cfg.model.image_size;
    if h != w {
        return Err(Error::Config(format!("simulated images are square, got image_size {h}x{w}")));
    }
    let pairs = sim::build_dataset(cfg.n_pairs, h, &cfg.noise, cfg.seed)?;
    let mut manifest = String::from("id,seed,sigma,gain\n");
    for p in &pairs {
        pgm::write(&out.join(format!("{}_ndct.pgm", p.id)), &p.ndct)?;
        pgm::write(&out.join(format!("{}_ldct.pgm", p.id)), &p.ldct)?;
        manifest.push_str(&format!("{},{},{},{}\n", p.id, p.seed, cfg.noise.sigma, cfg.noise.gain));
    }
    let mpath = out.join("manifest.csv");
    fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
    eprintln!("simulate: wrote {} pairs to {}", pairs.len(), out.display());
    Ok(())
}

fn pretrain(common: &Common, data: Option<PathBuf>) -> Result<()> {
    let cfg = common.load()?;
    let out = common.out("checkpoint path")?;
    let dir = data_dir(&cfg, data)?;
    let log = log_path(&cfg, out);
    ensure_parent(out)?;
    ensure_parent(&log)?;
    let items = pgm::load_dataset(&dir)?;
    let images: Vec<&Tensor> = items.iter().map(|it| &it.ldct).collect();
    check_sizes(&cfg, &images)?;

    let mut model_cfg = cfg.model.clone();
    model_cfg.shortcuts = Shortcuts::OFF;
    let mut model = SwinDenoiser::new(model_cfg, cfg.seed)?;
    let plan = cfg.train_plan(Stage::Pretrain);
    let rows = mae::run_stage(&mut model, &plan, StageData::Unlabeled(&images), &[])?;
    Checkpoint::from_model(&model).save(out)?;
    write_log(&log, &rows)?;
    report_training("pretrain", &rows, out);
    Ok(())
}

/// The first `limit` items (all by default) as pairs; later items may lack NDCT.
fn pairs_from(mut items: Vec<DatasetItem>, limit: Option<usize>) -> Result<Vec<PairedSample>> {
    if let Some(n) = limit {
        if n > items.len() {
            return Err(Error::Data(format!("labeled_limit {n} exceeds the {} available images", items.len())));
        }
        items.truncate(n);
    }
    pgm::into_pairs(items)
}

fn finetune(common: &Common, init: Option<PathBuf>, data: Option<PathBuf>) -> Result<()> {
    let cfg = common.load()?;
    let out = common.out("checkpoint path")?;
    let dir = data_dir(&cfg, data)?;
    let log = log_path(&cfg, out);
    ensure_parent(out)?;
    ensure_parent(&log)?;
    if let Some(p) = &init {
        existing(p, "checkpoint")?;
    }
    let ckpt = init.as_deref().map(Checkpoint::load).transpose()?;
    if let Some(c) = &ckpt {
        if !c.config.same_architecture(&cfg.model) {
            return Err(Error::Config(format!(
                "checkpoint {} was built for a different architecture than the configuration",
                init.as_deref().unwrap_or(Path::new("")).display()
            )));
        }
    }
    let val_items = match &cfg.val_dir {
        Some(v) if !v.is_dir() => {
            return Err(Error::Config(format!("validation directory {} does not exist", v.display())))
        }
        Some(v) => pgm::load_dataset(v)?,
        None => Vec::new(),
    };
    let pairs = pairs_from(pgm::load_dataset(&dir)?, cfg.labeled_limit)?;
    let validation = pairs_from(val_items, None)?;
    let imgs: Vec<&Tensor> = pairs.iter().chain(&validation).map(|p| &p.ldct).collect();
    check_sizes(&cfg, &imgs)?;

    let mut model_cfg = cfg.model.clone();
    model_cfg.shortcuts = Shortcuts::ON;
    let fresh = SwinDenoiser::new(model_cfg, cfg.seed)?;
    let mut model = match &ckpt {
        Some(c) => mae::transfer_weights(c, fresh)?,
        None => fresh,
    };
    let plan = cfg.train_plan(Stage::Finetune);
    let rows = mae::run_stage(&mut model, &plan, StageData::Paired(&pairs), &validation)?;
    Checkpoint::from_model(&model).save(out)?;
    write_log(&log, &rows)?;
    report_training("finetune", &rows, out);
    Ok(())
}

fn report_training(stage: &str, rows: &[LogRow], out: &Path) {
    let losses: Vec<f64> = rows.iter().filter_map(|r| r.loss).collect();
    if let (Some(a), Some(b)) = (losses.first(), losses.last()) {
        eprintln!(
            "{stage}: {} iterations, loss {a:.5} -> {b:.5}, wrote {}",
            losses.len(),
            out.display()
        );
    }
}

/// Report CSV: one row per image, then a `mean±std` row.
pub fn eval_report(metrics: &[ImageMetrics], rmse_scale: f64) -> String {
    let mut s = String::from("id,ssim,rmse,ldct_ssim,ldct_rmse\n");
    let scaled: Vec<ImageMetrics> = metrics
        .iter()
        .map(|m| ImageMetrics {
            rmse: m.rmse * rmse_scale,
            ldct_rmse: m.ldct_rmse * rmse_scale,
            ..m.clone()
        })
        .collect();
    for m in &scaled {
        s.push_str(&format!("{},{},{},{},{}\n", m.id, m.ssim, m.rmse, m.ldct_ssim, m.ldct_rmse));
    }
    let sum = mae::summarize(&scaled);
    let f = |(m, sd): (f64, f64)| format!("{m}±{sd}");
    s.push_str(&format!(
        "mean±std,{},{},{},{}\n",
        f(sum.ssim),
        f(sum.rmse),
        f(sum.ldct_ssim),
        f(sum.ldct_rmse)
    ));
    s
}

fn eval(common: &Common, init: &Path, data: &Path) -> Result<()> {
    let cfg = common.load()?;
    if let Some(out) = &common.out {
        ensure_parent(out)?;
    }
    if !data.is_dir() {
        return Err(Error::Config(format!("dataset directory {} does not exist", data.display())));
    }
    existing(init, "checkpoint")?;
    let model = Checkpoint::load(init)?.to_model()?;
    let pairs = pairs_from(pgm::load_dataset(data)?, None)?;
    let metrics = mae::evaluate(&model, &pairs, &cfg.loss.ssim)?;
    let report = eval_report(&metrics, cfg.rmse_scale);
    match &common.out {
        Some(out) => fs::write(out, report).map_err(|e| Error::io(out, e))?,
        None => std::io::stdout()
            .write_all(report.as_bytes())
            .map_err(|e| Error::io("<stdout>", e))?,
    }
    Ok(())
}

fn denoise(common: &Common, init: &Path, input: &Path) -> Result<()> {
    let out = common.out("output image")?;
    ensure_parent(out)?;
    existing(init, "checkpoint")?;
    existing(input, "input image")?;
    let model = Checkpoint::load(init)?.to_model()?;
    let image = pgm::read(input)?;
    let ws = model.config().window_size;
    let (h, w) = (image.shape()[0], image.shape()[1]);
    if h % ws != 0 || w % ws != 0 {
        return Err(Error::Data(format!(
            "{}: image {h}x{w} must have both sides divisible by the window size {ws}",
            input.display()
        )));
    }
    let clean = mae::denoise(&model, &image)?;
    if !clean.is_finite() {
        return Err(Error::NonFinite("denoised image"));
    }
    pgm::write(out, &clean)
}
