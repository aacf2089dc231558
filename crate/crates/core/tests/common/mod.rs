#![allow(dead_code)]

use maect::autograd::{Graph, Var};
use maect::swin::{AttentionWeights, BlockWeights, LN_EPS};
use maect::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

pub fn normal(shape: &[usize], std: f64, seed: u64) -> Tensor {
    use rand_distr::{Distribution, Normal};
    let mut r = rng(seed);
    let d = Normal::new(0.0, std).unwrap();
    Tensor::from_fn(shape, |_| d.sample(&mut r))
}

/// `||a - b|| / max(||a||, ||b||, floor)`.
pub fn normwise_rel(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> f64
where
    F: for<'g> Fn(&[Var<'g>]) -> Result<Var<'g>>,
{
    let g = Graph::inference();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&vars).unwrap();
    out.value().item().unwrap()
}

/// Analytic gradients of `f` at `inputs` next to central differences with
/// step `h`; returns the worst normwise relative error over the inputs.
pub fn grad_check<F>(inputs: &[Tensor], h: f64, f: F) -> f64
where
    F: for<'g> Fn(&[Var<'g>]) -> Result<Var<'g>>,
{
    let g = Graph::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&vars).unwrap();
    let grads = g.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*v);
        let mut numeric = vec![0.0; inputs[i].len()];
        for (j, num) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            *num = (eval_scalar(&f, &plus) - eval_scalar(&f, &minus)) / (2.0 * h);
        }
        worst = worst.max(normwise_rel(analytic.data(), &numeric, 1e-12));
    }
    worst
}

/// Contract `x` with fixed pseudo-random weights so every output element
/// reaches the scalar.
pub fn weighted_sum<'g>(x: Var<'g>, seed: u64) -> Result<Var<'g>> {
    let w = uniform(&x.shape(), -1.0, 1.0, seed);
    Ok(x.mul(x.graph().constant(w))?.sum())
}

use maect::losses::{combined_loss, LossConfig};
use maect::swin::{ModelConfig, SwinDenoiser};

fn model_loss(model: &SwinDenoiser, x: &Tensor, target: &Tensor) -> f64 {
    let g = Graph::inference();
    let bound = model.params().bind(&g);
    let pred = model.forward_var(&bound, g.constant(x.clone())).unwrap();
    combined_loss(pred, target, &LossConfig::default(), None)
        .unwrap()
        .value()
        .item()
        .unwrap()
}

/// Gradient check of the combined loss through the tiny 16x16 model with
/// randomized weights. Compares `samples` random coordinates (plus one per
/// tensor) and two random directional derivatives against central
/// differences; returns the worst normwise relative error.
pub fn model_grad_check(seed: u64, samples: usize) -> f64 {
    let mut model = SwinDenoiser::new(ModelConfig::tiny(16), seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    for p in model.params_mut().iter_mut() {
        for v in p.value.data_mut() {
            *v += r.random_range(-0.1..0.1);
        }
    }
    let x = uniform(&[1, 16, 16, 1], 0.0, 1.0, seed + 1);
    let target = uniform(&[1, 16, 16, 1], 0.0, 1.0, seed + 2);

    let g = Graph::new();
    let bound = model.params().bind(&g);
    let pred = model.forward_var(&bound, g.constant(x.clone())).unwrap();
    let loss = combined_loss(pred, &target, &LossConfig::default(), None).unwrap();
    let grads = g.backward(loss).unwrap();
    let analytic: Vec<Tensor> = bound.vars().iter().map(|v| grads.get_or_zeros(*v)).collect();

    let sizes: Vec<usize> = model.params().iter().map(|p| p.value.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut coords: Vec<(usize, usize)> = sizes.iter().enumerate().map(|(t, &n)| (t, r.random_range(0..n))).collect();
    for _ in 0..samples {
        let mut k = r.random_range(0..total);
        let mut t = 0;
        while k >= sizes[t] {
            k -= sizes[t];
            t += 1;
        }
        coords.push((t, k));
    }

    let h = 1e-5;
    let mut a = Vec::new();
    let mut n = Vec::new();
    for &(t, k) in &coords {
        let orig = model.params().iter().nth(t).unwrap().value.data()[k];
        let set = |m: &mut SwinDenoiser, v: f64| m.params_mut().iter_mut().nth(t).unwrap().value.data_mut()[k] = v;
        set(&mut model, orig + h);
        let lp = model_loss(&model, &x, &target);
        set(&mut model, orig - h);
        let lm = model_loss(&model, &x, &target);
        set(&mut model, orig);
        a.push(analytic[t].data()[k]);
        n.push((lp - lm) / (2.0 * h));
    }
    let mut worst = normwise_rel(&a, &n, 1e-12);

    for d_seed in 0..2u64 {
        let dirs: Vec<Tensor> = sizes
            .iter()
            .enumerate()
            .map(|(t, _)| normal(model.params().iter().nth(t).unwrap().value.shape(), 1.0, seed * 31 + d_seed * 7 + t as u64))
            .collect();
        let norm: f64 = dirs.iter().flat_map(|d| d.data()).map(|v| v * v).sum::<f64>().sqrt();
        let along: f64 = dirs
            .iter()
            .zip(&analytic)
            .map(|(d, g)| d.data().iter().zip(g.data()).map(|(u, v)| u * v).sum::<f64>())
            .sum::<f64>()
            / norm;
        let shifted = |sign: f64| {
            let mut m = model.clone();
            for (p, d) in m.params_mut().iter_mut().zip(&dirs) {
                for (v, u) in p.value.data_mut().iter_mut().zip(d.data()) {
                    *v += sign * h * u / norm;
                }
            }
            model_loss(&m, &x, &target)
        };
        let numeric = (shifted(1.0) - shifted(-1.0)) / (2.0 * h);
        worst = worst.max((along - numeric).abs() / along.abs().max(numeric.abs()).max(1e-12));
    }
    worst
}

/// erf by its Maclaurin series; accurate to ~1e-13 for |x| <= 3.
pub fn erf_series(x: f64) -> f64 {
    let mut term = x;
    let mut sum = x;
    for n in 1..200 {
        term *= -x * x / n as f64;
        let t = term / (2 * n + 1) as f64;
        sum += t;
        if t.abs() < 1e-17 {
            break;
        }
    }
    sum * 2.0 / std::f64::consts::PI.sqrt()
}

pub fn gelu_oracle(x: f64) -> f64 {
    0.5 * x * (1.0 + erf_series(x / std::f64::consts::SQRT_2))
}

/// Plain row-major matrix helpers over `Vec<Vec<f64>>`.
pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor, rows: usize, cols: usize) -> Mat {
    assert_eq!(t.len(), rows * cols);
    (0..rows).map(|r| t.data()[r * cols..(r + 1) * cols].to_vec()).collect()
}

pub fn affine(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            (0..b.len())
                .map(|j| b[j] + row.iter().enumerate().map(|(k, v)| v * w[k][j]).sum::<f64>())
                .collect()
        })
        .collect()
}

pub fn layer_norm_oracle(x: &Mat, gamma: &[f64], beta: &[f64], eps: f64) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mu) / (var + eps).sqrt() * gamma[i] + beta[i])
                .collect()
        })
        .collect()
}

/// Raw weights of one attention layer, rows/cols as plain matrices.
pub struct AttnParams {
    pub qkv_w: Mat,
    pub qkv_b: Vec<f64>,
    pub proj_w: Mat,
    pub proj_b: Vec<f64>,
    /// `[(2ws-1)², heads]`.
    pub table: Mat,
}

/// Brute-force windowed multi-head attention over the `n = ws²` tokens of a
/// single window. `mask[i][j]` is added to every head's logits.
pub fn attention_oracle(x: &Mat, p: &AttnParams, heads: usize, ws: usize, mask: Option<&Mat>) -> Mat {
    let n = x.len();
    let d = x[0].len();
    let dk = d / heads;
    let qkv = affine(x, &p.qkv_w, &p.qkv_b);
    let span = 2 * ws - 1;
    let mut concat = vec![vec![0.0; d]; n];
    for h in 0..heads {
        let q = |i: usize, j: usize| qkv[i][h * dk + j];
        let k = |i: usize, j: usize| qkv[i][d + h * dk + j];
        let v = |i: usize, j: usize| qkv[i][2 * d + h * dk + j];
        for i in 0..n {
            let mut logits = vec![0.0; n];
            for (j, l) in logits.iter_mut().enumerate() {
                let dot: f64 = (0..dk).map(|c| q(i, c) * k(j, c)).sum();
                let (yi, xi) = (i / ws, i % ws);
                let (yj, xj) = (j / ws, j % ws);
                let rel = (yi + ws - 1 - yj) * span + (xi + ws - 1 - xj);
                *l = dot / (dk as f64).sqrt() + p.table[rel][h] + mask.map_or(0.0, |m| m[i][j]);
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..dk {
                concat[i][h * dk + c] = (0..n).map(|j| e[j] / z * v(j, c)).sum();
            }
        }
    }
    affine(&concat, &p.proj_w, &p.proj_b)
}

/// Windowed SSIM by direct 2-D sums at every valid position, Gaussian
/// weights built from the 2-D density.
pub fn ssim_oracle(a: &[f64], b: &[f64], h: usize, w: usize, size: usize, sigma: f64, range: f64) -> f64 {
    let r = (size / 2) as f64;
    let mut wts = vec![vec![0.0; size]; size];
    let mut total = 0.0;
    for (u, row) in wts.iter_mut().enumerate() {
        for (v, x) in row.iter_mut().enumerate() {
            let (du, dv) = (u as f64 - r, v as f64 - r);
            *x = (-(du * du + dv * dv) / (2.0 * sigma * sigma)).exp();
            total += *x;
        }
    }
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    let mut sum = 0.0;
    let mut count = 0.0;
    for i in 0..=h - size {
        for j in 0..=w - size {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for u in 0..size {
                for v in 0..size {
                    let k = wts[u][v] / total;
                    let (x, y) = (a[(i + u) * w + j + v], b[(i + u) * w + j + v]);
                    ma += k * x;
                    mb += k * y;
                    saa += k * x * x;
                    sbb += k * y * y;
                    sab += k * x * y;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1.0;
        }
    }
    sum / count
}

/// Sample mean and unbiased variance of `n` noisy draws at constant clean
/// intensity `x`, drawn through the image-level noise path.
pub fn noise_moments(x: f64, n: usize, noise: &maect::sim::NoiseParams) -> (f64, f64) {
    let img = Tensor::full(&[n / 1000, 1000], x);
    let y = maect::sim::add_noise(&img, noise).unwrap();
    let d = y.data();
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (d.len() - 1) as f64;
    (mean, var)
}

/// Zero-padded 3x3 convolution on NHWC, weights `[9*cin, cout]`.
pub fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let [bs, h, wd, cin] = *x.shape() else { panic!() };
    let cout = b.len();
    Tensor::from_fn(&[bs, h, wd, cout], |k| {
        let co = k % cout;
        let j = (k / cout) % wd;
        let i = (k / cout / wd) % h;
        let bi = k / cout / wd / h;
        let mut s = b.data()[co];
        for dy in 0..3 {
            for dx in 0..3 {
                let (y, xx) = (i as isize + dy as isize - 1, j as isize + dx as isize - 1);
                if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                    continue;
                }
                for ci in 0..cin {
                    let v = x.data()[((bi * h + y as usize) * wd + xx as usize) * cin + ci];
                    s += v * w.data()[((dy * 3 + dx) * cin + ci) * cout + co];
                }
            }
        }
        s
    })
}

/// Fresh model with every parameter perturbed by N(0, 0.1^2) noise.
pub fn randomized(cfg: ModelConfig, seed: u64) -> SwinDenoiser {
    let mut m = SwinDenoiser::new(cfg, seed).unwrap();
    for (i, p) in m.params_mut().iter_mut().enumerate() {
        let noise = normal(p.value.shape(), 0.1, seed * 1000 + i as u64);
        for (v, n) in p.value.data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
    m
}

pub struct BlockParams {
    pub attn: AttnParams,
    pub norm1: (Vec<f64>, Vec<f64>),
    pub norm2: (Vec<f64>, Vec<f64>),
    pub fc1: (Mat, Vec<f64>),
    pub fc2: (Mat, Vec<f64>),
    pub raw: Vec<Tensor>,
}

pub fn block_params(d: usize, hidden: usize, heads: usize, ws: usize, seed: u64) -> BlockParams {
    let span = (2 * ws - 1) * (2 * ws - 1);
    let raw = vec![
        normal(&[d], 1.0, seed),
        normal(&[d], 0.3, seed + 1),
        normal(&[d, 3 * d], 0.5, seed + 2),
        normal(&[3 * d], 0.3, seed + 3),
        normal(&[d, d], 0.5, seed + 4),
        normal(&[d], 0.3, seed + 5),
        normal(&[span, heads], 0.5, seed + 6),
        normal(&[d], 1.0, seed + 7),
        normal(&[d], 0.3, seed + 8),
        normal(&[d, hidden], 0.5, seed + 9),
        normal(&[hidden], 0.3, seed + 10),
        normal(&[hidden, d], 0.5, seed + 11),
        normal(&[d], 0.3, seed + 12),
    ];
    let v = |i: usize| raw[i].data().to_vec();
    BlockParams {
        norm1: (v(0), v(1)),
        attn: AttnParams {
            qkv_w: to_mat(&raw[2], d, 3 * d),
            qkv_b: v(3),
            proj_w: to_mat(&raw[4], d, d),
            proj_b: v(5),
            table: to_mat(&raw[6], span, heads),
        },
        norm2: (v(7), v(8)),
        fc1: (to_mat(&raw[9], d, hidden), v(10)),
        fc2: (to_mat(&raw[11], hidden, d), v(12)),
        raw,
    }
}

pub fn block_weights<'g>(g: &'g Graph, raw: &[Tensor]) -> BlockWeights<'g> {
    let c = |i: usize| g.constant(raw[i].clone());
    BlockWeights {
        norm1: (c(0), c(1)),
        attn: AttentionWeights {
            qkv_w: c(2),
            qkv_b: c(3),
            proj_w: c(4),
            proj_b: c(5),
            rel_table: Some(c(6)),
        },
        norm2: (c(7), c(8)),
        fc1: (c(9), c(10)),
        fc2: (c(11), c(12)),
    }
}

pub fn block_oracle(t0: &Mat, p: &BlockParams, heads: usize, ws: usize, mask: Option<&Mat>) -> Mat {
    let a = attention_oracle(&layer_norm_oracle(t0, &p.norm1.0, &p.norm1.1, LN_EPS), &p.attn, heads, ws, mask);
    let t1: Mat = t0.iter().zip(&a).map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect()).collect();
    let hdn: Mat = affine(&layer_norm_oracle(&t1, &p.norm2.0, &p.norm2.1, LN_EPS), &p.fc1.0, &p.fc1.1)
        .into_iter()
        .map(|r| r.into_iter().map(gelu_oracle).collect())
        .collect();
    let m = affine(&hdn, &p.fc2.0, &p.fc2.1);
    t1.iter().zip(&m).map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect()).collect()
}

/// Largest deviation of `window_attention` on one 2x2 window (4 tokens,
/// 2 heads) from the brute-force oracle; also checks the rows of the
/// attention matrix sum to one.
pub fn attention_error(seed: u64) -> f64 {
    use maect::swin::{relative_position_index, window_attention, AttentionConfig};
    let (d, heads, ws) = (4, 2, 2);
    let p = block_params(d, 8, heads, ws, seed);
    let x = normal(&[1, 4, d], 1.0, seed + 100);
    let g = Graph::inference();
    let w = block_weights(&g, &p.raw).attn;
    let cfg = AttentionConfig {
        num_heads: heads,
        head_dim: d / heads,
        window_size: ws,
        shift: 0,
    };
    let rel = relative_position_index(ws);
    let got = window_attention(g.constant(x.clone()), &w, &cfg, None, Some(&rel)).unwrap();
    let want = attention_oracle(&to_mat(&x, 4, d), &p.attn, heads, ws, None).concat();
    let probs = got.probs.value();
    assert_eq!(probs.shape(), &[1, heads, 4, 4]);
    let row_err = probs
        .data()
        .chunks(4)
        .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    max_abs_diff(got.out.value().data(), &want).max(row_err)
}

/// Largest deviation of an unshifted `swin_block` on a 2x2 grid from the
/// attention + MLP residual composition.
pub fn block_error(seed: u64) -> f64 {
    use maect::swin::{relative_position_index, swin_block, AttentionConfig, BlockContext};
    let (d, heads, ws) = (4, 2, 2);
    let p = block_params(d, 8, heads, ws, seed);
    let x = normal(&[1, 2, 2, d], 1.0, seed + 100);
    let g = Graph::inference();
    let w = block_weights(&g, &p.raw);
    let cfg = AttentionConfig {
        num_heads: heads,
        head_dim: 2,
        window_size: ws,
        shift: 0,
    };
    let ctx = BlockContext {
        rel_index: Some(relative_position_index(ws)),
        shift_mask: None,
    };
    let got = swin_block(g.constant(x.clone()), &w, &cfg, &ctx).unwrap();
    let want = block_oracle(&to_mat(&x, 4, d), &p, heads, ws, None).concat();
    max_abs_diff(got.value().data(), &want)
}
