//! Window multi-head self-attention and the Swin transformer block.

use std::rc::Rc;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::params::Bound;

use super::window::{partition_var, reverse_var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionConfig {
    pub num_heads: usize,
    /// Per-head width `d_k`.
    pub head_dim: usize,
    pub window_size: usize,
    /// Cyclic shift in pixels: 0 or `window_size / 2`.
    pub shift: usize,
}

impl AttentionConfig {
    /// Attention logit scale `1 / sqrt(d_k)`.
    pub fn scale(&self) -> f64 {
        1.0 / (self.head_dim as f64).sqrt()
    }

    pub fn dim(&self) -> usize {
        self.num_heads * self.head_dim
    }
}

#[derive(Clone, Copy)]
pub struct AttentionWeights<'g> {
    /// `[d, 3d]`, output columns ordered q | k | v, heads contiguous within each.
    pub qkv_w: Var<'g>,
    pub qkv_b: Var<'g>,
    pub proj_w: Var<'g>,
    pub proj_b: Var<'g>,
    /// `[(2ws-1)², heads]`
    pub rel_table: Option<Var<'g>>,
}

impl<'g> AttentionWeights<'g> {
    pub fn from_bound(b: &Bound<'g>, prefix: &str, rel_pos_bias: bool) -> Result<Self> {
        Ok(AttentionWeights {
            qkv_w: b.var(&format!("{prefix}.qkv.weight"))?,
            qkv_b: b.var(&format!("{prefix}.qkv.bias"))?,
            proj_w: b.var(&format!("{prefix}.proj.weight"))?,
            proj_b: b.var(&format!("{prefix}.proj.bias"))?,
            rel_table: if rel_pos_bias {
                Some(b.var(&format!("{prefix}.relative_position_bias_table"))?)
            } else {
                None
            },
        })
    }
}

/// Output of [`window_attention`].
pub struct AttentionOutput<'g> {
    /// Same shape as the input tokens.
    pub out: Var<'g>,
    /// Softmax weights `[windows, heads, n, n]`.
    pub probs: Var<'g>,
}

/// Scaled dot-product attention inside every window:
/// `softmax(q kᵀ / sqrt(d_k) + bias + mask) v`, heads concatenated and
/// projected.
///
/// `x` is `[windows, n, d]` or `[b, windows, n, d]`; the output has the same
/// shape. `mask`, when given, is `[windows_per_image, n, n]` and is broadcast
/// over the batch and heads. `rel_index` indexes the relative position table.
pub fn window_attention<'g>(
    x: Var<'g>,
    w: &AttentionWeights<'g>,
    cfg: &AttentionConfig,
    mask: Option<Var<'g>>,
    rel_index: Option<&Rc<Vec<usize>>>,
) -> Result<AttentionOutput<'g>> {
    let in_shape = x.shape();
    let (nwin, n, d) = match *in_shape.as_slice() {
        [b, nw, n, d] => (b * nw, n, d),
        [nw, n, d] => (nw, n, d),
        _ => {
            return Err(Error::invalid(
                "window_attention",
                format!("expected [b, windows, n, d], got {in_shape:?}"),
            ))
        }
    };
    let (heads, dk) = (cfg.num_heads, cfg.head_dim);
    if heads == 0 || heads * dk != d {
        return Err(Error::invalid(
            "window_attention",
            format!("{heads} heads of width {dk} do not match embedding {d}"),
        ));
    }
    let x = x.reshape(&[nwin, n, d])?;
    let qkv = x
        .linear(w.qkv_w, w.qkv_b)?
        .reshape(&[nwin, n, 3, heads, dk])?
        .permute(&[2, 0, 3, 1, 4])?;
    let part = |i: usize| -> Result<Var<'g>> { qkv.narrow(0, i, 1)?.reshape(&[nwin, heads, n, dk]) };
    let q = part(0)?.scale(cfg.scale());
    let k = part(1)?;
    let v = part(2)?;

    let mut logits = q.matmul(k.transpose(2, 3)?)?;
    if let Some(table) = w.rel_table {
        let index = rel_index.ok_or_else(|| {
            Error::invalid("window_attention", "relative position table without index")
        })?;
        if index.len() != n * n {
            return Err(Error::invalid(
                "window_attention",
                format!("relative index covers {} pairs, window has {}", index.len(), n * n),
            ));
        }
        let bias = table
            .gather_rows(index.clone())?
            .reshape(&[n, n, heads])?
            .permute(&[2, 0, 1])?;
        logits = logits.add(bias)?;
    }
    if let Some(mask) = mask {
        let mw = mask.shape()[0];
        if mask.shape() != [mw, n, n] || nwin % mw != 0 {
            return Err(Error::shape("window_attention mask", &mask.shape(), &[nwin, n, n]));
        }
        logits = logits
            .reshape(&[nwin / mw, mw, heads, n, n])?
            .add(mask.reshape(&[mw, 1, n, n])?)?
            .reshape(&[nwin, heads, n, n])?;
    }
    let probs = logits.softmax(3)?;
    let out = probs
        .matmul(v)?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[nwin, n, d])?
        .linear(w.proj_w, w.proj_b)?
        .reshape(&in_shape)?;
    Ok(AttentionOutput { out, probs })
}

#[derive(Clone, Copy)]
pub struct BlockWeights<'g> {
    pub norm1: (Var<'g>, Var<'g>),
    pub attn: AttentionWeights<'g>,
    pub norm2: (Var<'g>, Var<'g>),
    pub fc1: (Var<'g>, Var<'g>),
    pub fc2: (Var<'g>, Var<'g>),
}

impl<'g> BlockWeights<'g> {
    pub fn from_bound(b: &Bound<'g>, prefix: &str, rel_pos_bias: bool) -> Result<Self> {
        let pair = |name: &str| -> Result<(Var<'g>, Var<'g>)> {
            Ok((
                b.var(&format!("{prefix}.{name}.weight"))?,
                b.var(&format!("{prefix}.{name}.bias"))?,
            ))
        };
        Ok(BlockWeights {
            norm1: pair("norm1")?,
            attn: AttentionWeights::from_bound(b, &format!("{prefix}.attn"), rel_pos_bias)?,
            norm2: pair("norm2")?,
            fc1: pair("mlp.fc1")?,
            fc2: pair("mlp.fc2")?,
        })
    }
}

/// Per-forward constants shared by all blocks.
pub struct BlockContext<'g> {
    pub rel_index: Option<Rc<Vec<usize>>>,
    /// Shifted-window mask for the current grid, if any block shifts.
    pub shift_mask: Option<Var<'g>>,
}

/// One Swin transformer block on a `[b, h, w, d]` feature grid:
///
/// ```text
/// t1 = WMHA(LN(t0)) + t0
/// ts = MLP(LN(t1)) + t1
/// ```
///
/// with the attention evaluated on (optionally shifted) windows.
pub fn swin_block<'g>(
    x: Var<'g>,
    w: &BlockWeights<'g>,
    cfg: &AttentionConfig,
    ctx: &BlockContext<'g>,
) -> Result<Var<'g>> {
    let shape = x.shape();
    let [b, h, wd, _] = *shape.as_slice() else {
        return Err(Error::invalid("swin_block", format!("expected [b, h, w, d], got {shape:?}")));
    };
    let ws = cfg.window_size;
    let s = cfg.shift as isize;

    let mut y = x.layer_norm(w.norm1.0, w.norm1.1, LN_EPS)?;
    if s != 0 {
        y = y.roll2d(-s, -s)?;
    }
    let windows = partition_var(y, ws)?;
    let mask = if s != 0 {
        Some(ctx.shift_mask.ok_or_else(|| {
            Error::invalid("swin_block", "shifted block needs an attention mask")
        })?)
    } else {
        None
    };
    let attn = window_attention(windows, &w.attn, cfg, mask, ctx.rel_index.as_ref())?;
    let mut y = reverse_var(attn.out, b, h, wd, ws)?;
    if s != 0 {
        y = y.roll2d(s, s)?;
    }
    let t1 = x.add(y)?;

    let m = t1
        .layer_norm(w.norm2.0, w.norm2.1, LN_EPS)?
        .linear(w.fc1.0, w.fc1.1)?
        .gelu()
        .linear(w.fc2.0, w.fc2.1)?;
    t1.add(m)
}
