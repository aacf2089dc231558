//! Window partitioning, cyclic shifts and the shifted-window attention mask.

use std::rc::Rc;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Additive logit penalty between tokens from different pre-shift regions.
pub const MASK_PENALTY: f64 = -100.0;

/// Tokens grouped per window: `[b, windows, window_size², d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub tokens: Tensor,
    pub window_size: usize,
}

impl TokenBatch {
    pub fn batch(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn windows(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn tokens_per_window(&self) -> usize {
        self.tokens.shape()[2]
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[3]
    }
}

fn check_grid(op: &'static str, shape: &[usize], ws: usize) -> Result<(usize, usize, usize, usize)> {
    let [b, h, w, d] = *shape else {
        return Err(Error::invalid(op, format!("expected [b, h, w, d], got {shape:?}")));
    };
    if ws == 0 || h % ws != 0 || w % ws != 0 {
        return Err(Error::invalid(
            op,
            format!("{h}x{w} grid is not divisible by window size {ws}"),
        ));
    }
    Ok((b, h, w, d))
}

const PARTITION_AXES: [usize; 6] = [0, 1, 3, 2, 4, 5];

/// `[b, h, w, d] -> [b, (h/ws)(w/ws), ws², d]`, windows in row-major order
/// and tokens row-major within each window.
pub fn window_partition(x: &Tensor, window_size: usize) -> Result<TokenBatch> {
    let ws = window_size;
    let (b, h, w, d) = check_grid("window_partition", x.shape(), ws)?;
    let tokens = x
        .reshape(&[b, h / ws, ws, w / ws, ws, d])?
        .permute(&PARTITION_AXES)?
        .reshape(&[b, (h / ws) * (w / ws), ws * ws, d])?;
    Ok(TokenBatch {
        tokens,
        window_size: ws,
    })
}

/// Inverse of [`window_partition`].
pub fn window_reverse(t: &TokenBatch, h: usize, w: usize) -> Result<Tensor> {
    let ws = t.window_size;
    let shape = t.tokens.shape();
    if shape.len() != 4
        || ws == 0
        || !h.is_multiple_of(ws)
        || !w.is_multiple_of(ws)
        || shape[1] != (h / ws) * (w / ws)
        || shape[2] != ws * ws
    {
        return Err(Error::invalid(
            "window_reverse",
            format!("tokens {shape:?} (window {ws}) do not tile a {h}x{w} grid"),
        ));
    }
    let (b, d) = (shape[0], shape[3]);
    t.tokens
        .reshape(&[b, h / ws, w / ws, ws, ws, d])?
        .permute(&PARTITION_AXES)?
        .reshape(&[b, h, w, d])
}

/// Toroidal roll of a `[b, h, w, d]` grid by `offset` along both spatial axes.
pub fn cyclic_shift(x: &Tensor, offset: isize) -> Result<Tensor> {
    tensor::roll2d(x, offset, offset)
}

/// Differentiable partition: `[b, h, w, d] -> [b * windows, ws², d]`.
pub fn partition_var<'g>(x: Var<'g>, ws: usize) -> Result<Var<'g>> {
    let (b, h, w, d) = check_grid("window_partition", &x.shape(), ws)?;
    x.reshape(&[b, h / ws, ws, w / ws, ws, d])?
        .permute(&PARTITION_AXES)?
        .reshape(&[b * (h / ws) * (w / ws), ws * ws, d])
}

/// Differentiable inverse of [`partition_var`].
pub fn reverse_var<'g>(t: Var<'g>, b: usize, h: usize, w: usize, ws: usize) -> Result<Var<'g>> {
    let shape = t.shape();
    let d = *shape.last().unwrap_or(&0);
    if shape.len() != 3 || shape[0] != b * (h / ws) * (w / ws) || shape[1] != ws * ws {
        return Err(Error::invalid(
            "window_reverse",
            format!("tokens {shape:?} do not tile {b}x{h}x{w} with window {ws}"),
        ));
    }
    t.reshape(&[b, h / ws, w / ws, ws, ws, d])?
        .permute(&PARTITION_AXES)?
        .reshape(&[b, h, w, d])
}

/// Region label of every pixel of the rolled grid: pixels that were
/// contiguous before the roll share a label.
fn region_labels(h: usize, w: usize, ws: usize, shift: usize) -> Vec<usize> {
    let band = |i: usize, n: usize| {
        if i < n - ws {
            0
        } else if i < n - shift {
            1
        } else {
            2
        }
    };
    let mut out = vec![0; h * w];
    for i in 0..h {
        for j in 0..w {
            out[i * w + j] = band(i, h) * 3 + band(j, w);
        }
    }
    out
}

/// `[windows, ws², ws²]` additive mask for attention over a grid rolled by
/// `-shift`: 0 within a region, [`MASK_PENALTY`] across regions.
pub fn shift_attention_mask(h: usize, w: usize, ws: usize, shift: usize) -> Result<Tensor> {
    if ws == 0 || !h.is_multiple_of(ws) || !w.is_multiple_of(ws) || shift >= ws {
        return Err(Error::invalid(
            "shift_attention_mask",
            format!("grid {h}x{w}, window {ws}, shift {shift}"),
        ));
    }
    let labels = region_labels(h, w, ws, shift);
    let (nh, nw, n) = (h / ws, w / ws, ws * ws);
    let mut data = vec![0.0; nh * nw * n * n];
    for wy in 0..nh {
        for wx in 0..nw {
            let win = wy * nw + wx;
            let lab: Vec<usize> = (0..n)
                .map(|t| labels[(wy * ws + t / ws) * w + wx * ws + t % ws])
                .collect();
            for a in 0..n {
                for c in 0..n {
                    if lab[a] != lab[c] {
                        data[(win * n + a) * n + c] = MASK_PENALTY;
                    }
                }
            }
        }
    }
    Tensor::new(&[nh * nw, n, n], data)
}

/// Index into the `(2ws-1)²`-row relative position bias table for every
/// (query, key) token pair of a window, flattened row-major.
pub fn relative_position_index(ws: usize) -> Rc<Vec<usize>> {
    let n = ws * ws;
    let span = 2 * ws - 1;
    let mut idx = Vec::with_capacity(n * n);
    for a in 0..n {
        let (ay, ax) = (a / ws, a % ws);
        for c in 0..n {
            let (cy, cx) = (c / ws, c % ws);
            let dy = ay + ws - 1 - cy;
            let dx = ax + ws - 1 - cx;
            idx.push(dy * span + dx);
        }
    }
    Rc::new(idx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_window_and_roundtrip() {
        let x = Tensor::from_fn(&[1, 8, 8, 3], |i| i as f64);
        let t = window_partition(&x, 8).unwrap();
        assert_eq!(t.tokens.shape(), &[1, 1, 64, 3]);
        assert_eq!(t.tokens.data(), x.data());

        let x = Tensor::from_fn(&[2, 16, 16, 2], |i| (i as f64).sin());
        let t = window_partition(&x, 8).unwrap();
        assert_eq!(t.windows(), 4);
        assert_eq!(window_reverse(&t, 16, 16).unwrap(), x);
    }

    #[test]
    fn unit_windows_are_identity() {
        let x = Tensor::from_fn(&[1, 3, 5, 2], |i| i as f64);
        let t = window_partition(&x, 1).unwrap();
        assert_eq!(t.tokens.data(), x.data());
    }

    #[test]
    fn indivisible_rejected() {
        assert!(window_partition(&Tensor::zeros(&[1, 12, 16, 1]), 8).is_err());
        let t = window_partition(&Tensor::zeros(&[1, 16, 16, 1]), 8).unwrap();
        assert!(window_reverse(&t, 8, 16).is_err());
    }

    #[test]
    fn mask_blocks_cross_region_pairs() {
        // 16x16 grid, window 8, shift 4: window 0 is a single region,
        // the last window mixes four regions.
        let m = shift_attention_mask(16, 16, 8, 4).unwrap();
        assert_eq!(m.shape(), &[4, 64, 64]);
        assert!(m.data()[..64 * 64].iter().all(|&v| v == 0.0));
        let last = &m.data()[3 * 4096..];
        // token 0 (top-left quadrant) vs token 63 (bottom-right quadrant)
        assert_eq!(last[63], MASK_PENALTY);
        assert_eq!(last[1], 0.0);
    }

    #[test]
    fn relative_index_spans_table() {
        let idx = relative_position_index(3);
        assert_eq!(idx.len(), 81);
        assert_eq!(*idx.iter().max().unwrap(), 24);
        // diagonal is the zero offset
        assert!((0..9).all(|a| idx[a * 9 + a] == 2 * 5 + 2));
    }
}
