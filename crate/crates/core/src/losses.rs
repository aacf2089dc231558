//! L1 / SSIM training losses and SSIM / RMSE evaluation metrics.
//!
//! Images are `[b, h, w, 1]` tensors (a bare `[h, w]` is accepted by the
//! metric functions). SSIM uses Gaussian-weighted local statistics over
//! windows that lie fully inside the image, so the SSIM map is
//! `(h - ws + 1) x (w - ws + 1)` per image.

use std::rc::Rc;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub window_size: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range `L` of the intensities.
    pub data_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            window_size: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
        }
    }
}

impl SsimParams {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.data_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.data_range).powi(2)
    }

    /// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
    pub fn kernel(&self) -> Vec<f64> {
        let c = (self.window_size as f64 - 1.0) / 2.0;
        let raw: Vec<f64> = (0..self.window_size)
            .map(|i| {
                let x = i as f64 - c;
                (-x * x / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda_l1: f64,
    pub lambda_ssim: f64,
    pub ssim: SsimParams,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_l1: 1.0,
            lambda_ssim: 0.2,
            ssim: SsimParams::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v >= 0.0 && v.is_finite();
        if !ok(self.lambda_l1) || !ok(self.lambda_ssim) {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        if self.lambda_l1 == 0.0 && self.lambda_ssim == 0.0 {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

fn as_grid(op: &'static str, t: &Tensor) -> Result<Tensor> {
    match *t.shape() {
        [_, _, _, 1] => Ok(t.clone()),
        [h, w] => t.reshape(&[1, h, w, 1]),
        _ => Err(Error::invalid(op, format!("expected [b, h, w, 1] or [h, w], got {:?}", t.shape()))),
    }
}

fn same_dims(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// Mean absolute difference, optionally over pixels where `mask > 0` only.
/// An empty selection gives 0.
pub fn l1(a: &Tensor, b: &Tensor, mask: Option<&Tensor>) -> Result<f64> {
    same_dims("l1", a, b)?;
    match mask {
        None => Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64),
        Some(m) => {
            same_dims("l1 mask", a, m)?;
            let (mut s, mut n) = (0.0, 0.0);
            for ((x, y), &w) in a.data().iter().zip(b.data()).zip(m.data()) {
                if w > 0.0 {
                    s += (x - y).abs();
                    n += 1.0;
                }
            }
            Ok(if n == 0.0 { 0.0 } else { s / n })
        }
    }
}

/// Root mean square error in the caller's intensity units.
pub fn rmse(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_dims("rmse", a, b)?;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    Ok(mse.sqrt())
}

/// Per-position SSIM map, `[b, h - ws + 1, w - ws + 1, 1]`.
pub fn ssim_map(a: &Tensor, b: &Tensor, p: &SsimParams) -> Result<Tensor> {
    same_dims("ssim", a, b)?;
    let (a, b) = (as_grid("ssim", a)?, as_grid("ssim", b)?);
    let k = p.kernel();
    let blur = |t: &Tensor| tensor::blur_valid(t, &k);
    let mu_a = blur(&a)?;
    let mu_b = blur(&b)?;
    let aa = blur(&a.zip_map(&a, |x, y| x * y)?)?;
    let bb = blur(&b.zip_map(&b, |x, y| x * y)?)?;
    let ab = blur(&a.zip_map(&b, |x, y| x * y)?)?;
    let (c1, c2) = (p.c1(), p.c2());
    let data = (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a.data()[i], mu_b.data()[i]);
            let va = aa.data()[i] - ma * ma;
            let vb = bb.data()[i] - mb * mb;
            let cov = ab.data()[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .collect();
    Tensor::new(mu_a.shape(), data)
}

/// Mean SSIM over all map positions of all images.
pub fn ssim(a: &Tensor, b: &Tensor, p: &SsimParams) -> Result<f64> {
    Ok(ssim_map(a, b, p)?.mean())
}

/// SSIM-map positions whose whole window lies where `pixel_mask > 0`.
pub fn ssim_support(pixel_mask: &Tensor, p: &SsimParams) -> Result<Tensor> {
    let m = as_grid("ssim_support", pixel_mask)?.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let ones = vec![1.0; p.window_size];
    let counts = tensor::blur_valid(&m, &ones)?;
    let full = (p.window_size * p.window_size) as f64;
    Ok(counts.map(|c| if c >= full - 0.5 { 1.0 } else { 0.0 }))
}

/// Differentiable L1 between `pred` and a fixed `target`.
pub fn l1_var<'g>(pred: Var<'g>, target: &Tensor, mask: Option<&Tensor>) -> Result<Var<'g>> {
    let pv = pred.value();
    same_dims("l1", &pv, target)?;
    let g = pred.graph();
    let diff = pred.sub(g.constant(target.clone()))?.abs();
    match mask {
        None => Ok(diff.mean()),
        Some(m) => {
            same_dims("l1 mask", target, m)?;
            let sel = m.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
            let n = sel.sum();
            if n == 0.0 {
                return Ok(g.constant(Tensor::scalar(0.0)));
            }
            Ok(diff.mul(g.constant(sel))?.sum().scale(1.0 / n))
        }
    }
}

/// Differentiable mean SSIM between `pred` and a fixed `target`, optionally
/// averaged over the map positions selected by `support` (see
/// [`ssim_support`]). `None` is returned for an empty selection.
pub fn ssim_var<'g>(
    pred: Var<'g>,
    target: &Tensor,
    p: &SsimParams,
    support: Option<&Tensor>,
) -> Result<Option<Var<'g>>> {
    let pv = pred.value();
    same_dims("ssim", &pv, target)?;
    let g = pred.graph();
    let k = Rc::new(p.kernel());
    let t = g.constant(target.clone());
    let mu_a = pred.blur_valid(k.clone())?;
    let mu_b = t.blur_valid(k.clone())?;
    let mu_aa = mu_a.square();
    let mu_bb = mu_b.square();
    let mu_ab = mu_a.mul(mu_b)?;
    let var_a = pred.square().blur_valid(k.clone())?.sub(mu_aa)?;
    let var_b = t.square().blur_valid(k.clone())?.sub(mu_bb)?;
    let cov = pred.mul(t)?.blur_valid(k)?.sub(mu_ab)?;
    let (c1, c2) = (p.c1(), p.c2());
    let num = mu_ab.scale(2.0).add_scalar(c1).mul(cov.scale(2.0).add_scalar(c2))?;
    let den = mu_aa
        .add(mu_bb)?
        .add_scalar(c1)
        .mul(var_a.add(var_b)?.add_scalar(c2))?;
    let map = num.div(den)?;
    match support {
        None => Ok(Some(map.mean())),
        Some(s) => {
            if s.shape() != map.shape().as_slice() {
                return Err(Error::shape("ssim support", s.shape(), &map.shape()));
            }
            let n = s.sum();
            if n == 0.0 {
                return Ok(None);
            }
            Ok(Some(map.mul(g.constant(s.clone()))?.sum().scale(1.0 / n)))
        }
    }
}

/// `lambda_l1 * L1 + lambda_ssim * (1 - SSIM)`, both restricted to
/// `pixel_mask` when given. Gradients flow to `pred` only.
pub fn combined_loss<'g>(
    pred: Var<'g>,
    target: &Tensor,
    cfg: &LossConfig,
    pixel_mask: Option<&Tensor>,
) -> Result<Var<'g>> {
    let g = pred.graph();
    let mut loss = g.constant(Tensor::scalar(0.0));
    if cfg.lambda_l1 != 0.0 {
        loss = loss.add(l1_var(pred, target, pixel_mask)?.scale(cfg.lambda_l1))?;
    }
    if cfg.lambda_ssim != 0.0 {
        let support = pixel_mask.map(|m| ssim_support(m, &cfg.ssim)).transpose()?;
        if let Some(s) = ssim_var(pred, target, &cfg.ssim, support.as_ref())? {
            loss = loss.add(s.neg().add_scalar(1.0).scale(cfg.lambda_ssim))?;
        }
    }
    Ok(loss)
}
