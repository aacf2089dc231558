//! Synthetic low-dose CT data: mixed Poisson–Gaussian noise on procedural
//! ellipse phantoms, plus integer-factor area resizing.
//!
//! Noise model per pixel with clean intensity `x` (normalized to [0, 1]):
//!
//! ```text
//! y = g * Poisson(x / g) + Normal(0, sigma²)      E[y] = x,  Var[y] = sigma² + g·x
//! ```
//!
//! then clamped to `[0, 1 + 6 sigma]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::error::{Error, Result};
use crate::par;
use crate::seed::derive_seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseParams {
    /// Gaussian standard deviation (normalized units).
    pub sigma: f64,
    /// Poisson gain: intensity per photon count.
    pub gain: f64,
    pub seed: u64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        NoiseParams {
            sigma: 0.02,
            gain: 0.002,
            seed: 0,
        }
    }
}

impl NoiseParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma {} must be finite and >= 0", self.sigma)));
        }
        if !(self.gain > 0.0 && self.gain.is_finite()) {
            return Err(Error::Config(format!("gain {} must be finite and > 0", self.gain)));
        }
        Ok(())
    }

    /// Upper clamp of noisy intensities.
    pub fn ceiling(&self) -> f64 {
        1.0 + 6.0 * self.sigma
    }

    /// Pre-clamp variance at clean intensity `x`.
    pub fn variance(&self, x: f64) -> f64 {
        self.sigma * self.sigma + self.gain * x
    }
}

/// One unclamped noisy draw for clean intensity `x`.
pub fn sample_noisy<R: Rng>(x: f64, sigma: f64, gain: f64, rng: &mut R) -> f64 {
    let lambda = x / gain;
    let photons = if lambda > 0.0 {
        Poisson::new(lambda).map(|p| p.sample(rng)).unwrap_or(lambda)
    } else {
        0.0
    };
    let gauss = if sigma > 0.0 {
        Normal::new(0.0, sigma).expect("sigma checked").sample(rng)
    } else {
        0.0
    };
    gain * photons + gauss
}

/// Apply the mixed noise model to an image of any shape.
///
/// Rows (runs of the last axis) draw from independent streams derived from
/// `params.seed`, so results do not depend on the thread count.
pub fn add_noise(x: &Tensor, params: &NoiseParams) -> Result<Tensor> {
    params.validate()?;
    if let Some(v) = x.data().iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::Data(format!("clean image contains invalid intensity {v}")));
    }
    let row = *x.shape().last().unwrap_or(&1);
    let rows: Vec<&[f64]> = x.data().chunks(row).collect();
    let ceiling = params.ceiling();
    let noisy = par::map_range(rows.len(), |r| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(params.seed, r as u64));
        rows[r]
            .iter()
            .map(|&v| sample_noisy(v, params.sigma, params.gain, &mut rng).clamp(0.0, ceiling))
            .collect::<Vec<f64>>()
    });
    Tensor::new(x.shape(), noisy.concat())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    /// Rotation in radians.
    pub angle: f64,
    /// Additive intensity.
    pub value: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

/// Procedural phantom: a body ellipse plus 5–12 interior ellipses.
#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    /// `[size, size]`, values in [0, 1].
    pub image: Tensor,
    pub ellipses: Vec<Ellipse>,
    pub seed: u64,
}

pub const MIN_PHANTOM_SIZE: usize = 16;

pub fn make_phantom(size: usize, seed: u64) -> Result<Phantom> {
    if size < MIN_PHANTOM_SIZE {
        return Err(Error::Config(format!("phantom size {size} is below {MIN_PHANTOM_SIZE}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let body = Ellipse {
        cx: rng.random_range(-0.05..0.05),
        cy: rng.random_range(-0.05..0.05),
        a: rng.random_range(0.72..0.9),
        b: rng.random_range(0.6..0.8),
        angle: rng.random_range(-0.3..0.3),
        value: rng.random_range(0.35..0.55),
    };
    let mut ellipses = vec![body];
    let count = rng.random_range(5..=12);
    for _ in 0..count {
        let r: f64 = rng.random_range(0.0..0.55);
        let t: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        ellipses.push(Ellipse {
            cx: body.cx + r * t.cos() * body.a,
            cy: body.cy + r * t.sin() * body.b,
            a: rng.random_range(0.05..0.3),
            b: rng.random_range(0.04..0.22),
            angle: rng.random_range(0.0..std::f64::consts::PI),
            value: rng.random_range(-0.3..0.4),
        });
    }
    let n = size as f64;
    let image = Tensor::from_fn(&[size, size], |k| {
        let (i, j) = (k / size, k % size);
        let y = 2.0 * (i as f64 + 0.5) / n - 1.0;
        let x = 2.0 * (j as f64 + 0.5) / n - 1.0;
        let v: f64 = ellipses
            .iter()
            .filter(|e| e.contains(x, y))
            .map(|e| e.value)
            .sum();
        v.clamp(0.0, 1.0)
    });
    Ok(Phantom {
        image,
        ellipses,
        seed,
    })
}

/// Integer-factor area interpolation of an `[h, w]` image: each output pixel
/// is the mean of its source block.
pub fn resize_area(x: &Tensor, th: usize, tw: usize) -> Result<Tensor> {
    let [h, w] = *x.shape() else {
        return Err(Error::invalid("resize_area", format!("expected [h, w], got {:?}", x.shape())));
    };
    if th == 0 || tw == 0 || h % th != 0 || w % tw != 0 {
        return Err(Error::invalid(
            "resize_area",
            format!("{h}x{w} -> {th}x{tw} is not an integer-factor reduction"),
        ));
    }
    let (fy, fx) = (h / th, w / tw);
    let norm = (fy * fx) as f64;
    Ok(Tensor::from_fn(&[th, tw], |k| {
        let (oi, oj) = (k / tw, k % tw);
        let mut s = 0.0;
        for i in oi * fy..(oi + 1) * fy {
            for j in oj * fx..(oj + 1) * fx {
                s += x.data()[i * w + j];
            }
        }
        s / norm
    }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub id: String,
    /// Seed the pair was generated from.
    pub seed: u64,
    /// `[h, w]` clean image.
    pub ndct: Tensor,
    /// `[h, w]` noisy image.
    pub ldct: Tensor,
}

/// Seed of sample `index` of a dataset generated from `seed`.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, index as u64)
}

/// Generate one pair from its sample seed.
pub fn make_pair(id: String, size: usize, noise: &NoiseParams, seed: u64) -> Result<PairedSample> {
    let phantom = make_phantom(size, derive_seed(seed, 0))?;
    let params = NoiseParams {
        seed: derive_seed(seed, 1),
        ..*noise
    };
    let ldct = add_noise(&phantom.image, &params)?;
    Ok(PairedSample {
        id,
        seed,
        ndct: phantom.image,
        ldct,
    })
}

/// `n_pairs` phantom/noisy pairs with per-sample derived seeds.
/// `noise.seed` is ignored; every stream derives from `seed`.
pub fn build_dataset(n_pairs: usize, size: usize, noise: &NoiseParams, seed: u64) -> Result<Vec<PairedSample>> {
    if n_pairs == 0 {
        return Err(Error::Config("dataset needs at least one pair".into()));
    }
    noise.validate()?;
    par::map_range(n_pairs, |i| make_pair(format!("{i:04}"), size, noise, sample_seed(seed, i)))
        .into_iter()
        .collect()
}
