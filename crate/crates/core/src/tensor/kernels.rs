use super::{numel, strides, Tensor};
use crate::error::{Error, Result};
use crate::par;

/// Work (multiply-adds) below which kernels stay on the calling thread.
const PAR_MIN_WORK: usize = 1 << 16;

// ---------------------------------------------------------------------------
// Broadcasting

/// Numpy-style broadcast of two shapes (right-aligned, size-1 dims stretch).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape("broadcast", a, b)),
        };
    }
    Ok(out)
}

/// Strides of `src` viewed as `target` (zero along broadcast dims).
fn broadcast_strides(src: &[usize], target: &[usize]) -> Vec<usize> {
    let st = strides(src);
    let off = target.len() - src.len();
    (0..target.len())
        .map(|i| {
            if i < off || src[i - off] == 1 {
                0
            } else {
                st[i - off]
            }
        })
        .collect()
}

/// Visit every multi-index of `shape` in row-major order, passing the
/// matching offset under `view_strides`.
fn walk(shape: &[usize], view_strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let n = numel(shape);
    let r = shape.len();
    let mut idx = vec![0usize; r];
    let mut off = 0usize;
    for lin in 0..n {
        f(lin, off);
        for ax in (0..r).rev() {
            idx[ax] += 1;
            off += view_strides[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            off -= view_strides[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
}

pub fn broadcast_to(t: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if t.shape() == shape {
        return Ok(t.clone());
    }
    if broadcast_shape(t.shape(), shape)? != shape {
        return Err(Error::shape("broadcast_to", t.shape(), shape));
    }
    let bs = broadcast_strides(t.shape(), shape);
    let mut data = vec![0.0; numel(shape)];
    let src = t.data();
    walk(shape, &bs, |lin, off| data[lin] = src[off]);
    Ok(Tensor::new(shape, data).expect("broadcast shape"))
}

/// Sum `t` down to `shape`, the adjoint of [`broadcast_to`].
pub fn sum_to(t: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if t.shape() == shape {
        return Ok(t.clone());
    }
    if broadcast_shape(shape, t.shape())? != t.shape() {
        return Err(Error::shape("sum_to", t.shape(), shape));
    }
    let bs = broadcast_strides(shape, t.shape());
    let mut data = vec![0.0; numel(shape)];
    let src = t.data();
    walk(t.shape(), &bs, |lin, off| data[off] += src[lin]);
    Ok(Tensor::new(shape, data).expect("reduced shape"))
}

/// Elementwise binary op with broadcasting.
pub fn broadcast_zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let shape = broadcast_shape(a.shape(), b.shape())?;
    let ab = broadcast_to(a, &shape)?;
    let bb = broadcast_to(b, &shape)?;
    ab.zip_map(&bb, f)
}

// ---------------------------------------------------------------------------
// Matrix products

/// One `m x p` product `op(a) * op(b)` where `op` optionally transposes.
///
/// `a` is stored `m x k` (or `k x m` when `ta`), `b` is `k x p` (or `p x k`
/// when `tb`). Every output element is accumulated over `k` in ascending
/// order, whichever kernel or thread computes it.
#[allow(clippy::too_many_arguments)]
fn gemm_rows(
    a: &[f64],
    b: &[f64],
    out: &mut [f64],
    row0: usize,
    m: usize,
    k: usize,
    p: usize,
    ta: bool,
    tb: bool,
) {
    let rows = out.len() / p;
    out.fill(0.0);
    for r in 0..rows {
        let i = row0 + r;
        let orow = &mut out[r * p..(r + 1) * p];
        match (ta, tb) {
            (false, false) => {
                let arow = &a[i * k..(i + 1) * k];
                for (kk, &av) in arow.iter().enumerate() {
                    let brow = &b[kk * p..(kk + 1) * p];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
            (false, true) => {
                let arow = &a[i * k..(i + 1) * k];
                for (j, o) in orow.iter_mut().enumerate() {
                    let brow = &b[j * k..(j + 1) * k];
                    let mut s = 0.0;
                    for (&x, &y) in arow.iter().zip(brow) {
                        s += x * y;
                    }
                    *o = s;
                }
            }
            (true, false) => {
                for kk in 0..k {
                    let av = a[kk * m + i];
                    let brow = &b[kk * p..(kk + 1) * p];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
            (true, true) => {
                for (j, o) in orow.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for kk in 0..k {
                        s += a[kk * m + i] * b[j * k + kk];
                    }
                    *o = s;
                }
            }
        }
    }
}

/// Batched product over `batch` contiguous matrices.
#[allow(clippy::too_many_arguments)]
pub(crate) fn bmm(
    a: &[f64],
    b: &[f64],
    batch: usize,
    m: usize,
    k: usize,
    p: usize,
    ta: bool,
    tb: bool,
) -> Vec<f64> {
    let mut out = vec![0.0; batch * m * p];
    let work = batch * m * k * p;
    if batch == 1 {
        let rows_per = (m / 32).max(1);
        par::for_chunks_mut(&mut out, rows_per * p, work, PAR_MIN_WORK, |ci, chunk| {
            gemm_rows(a, b, chunk, ci * rows_per, m, k, p, ta, tb);
        });
    } else {
        par::for_chunks_mut(&mut out, m * p, work, PAR_MIN_WORK, |bi, chunk| {
            let asl = &a[bi * m * k..(bi + 1) * m * k];
            let bsl = &b[bi * k * p..(bi + 1) * k * p];
            gemm_rows(asl, bsl, chunk, 0, m, k, p, ta, tb);
        });
    }
    out
}

/// Matrix product `a[.., m, k] x b[.., k, p] -> [.., m, p]` with numpy
/// broadcasting over the leading batch dimensions.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ash, bsh) = (a.shape(), b.shape());
    if ash.len() < 2 || bsh.len() < 2 || ash[ash.len() - 1] != bsh[bsh.len() - 2] {
        return Err(Error::shape("matmul", ash, bsh));
    }
    let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
    let p = bsh[bsh.len() - 1];
    if bsh.len() == 2 {
        // Shared right operand: fold all of a's batch dims into rows.
        let rows = a.len() / k;
        let data = bmm(a.data(), b.data(), 1, rows, k, p, false, false);
        let mut shape = ash.to_vec();
        *shape.last_mut().unwrap() = p;
        return Tensor::new(&shape, data);
    }
    let batch = broadcast_shape(&ash[..ash.len() - 2], &bsh[..bsh.len() - 2])
        .map_err(|_| Error::shape("matmul", ash, bsh))?;
    let nb = numel(&batch);
    let a_full = broadcast_to(a, &[batch.as_slice(), &[m, k]].concat())?;
    let b_full = broadcast_to(b, &[batch.as_slice(), &[k, p]].concat())?;
    let data = bmm(a_full.data(), b_full.data(), nb, m, k, p, false, false);
    Tensor::new(&[batch.as_slice(), &[m, p]].concat(), data)
}

// ---------------------------------------------------------------------------
// Softmax

/// `(outer, len, inner)` split of `shape` around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

/// Numerically stable softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::invalid("softmax", format!("axis {axis} out of range for {:?}", x.shape())));
    }
    if x.data().iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("softmax input"));
    }
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let src = x.data();
    let mut out = vec![0.0; x.len()];
    let work = x.len() * 8;
    par::for_chunks_mut(&mut out, len * inner, work, PAR_MIN_WORK, |o, chunk| {
        let base = o * len * inner;
        for i in 0..inner {
            let mut mx = f64::NEG_INFINITY;
            for j in 0..len {
                mx = mx.max(src[base + j * inner + i]);
            }
            let mut s = 0.0;
            for j in 0..len {
                let e = (src[base + j * inner + i] - mx).exp();
                chunk[j * inner + i] = e;
                s += e;
            }
            for j in 0..len {
                chunk[j * inner + i] /= s;
            }
        }
    });
    debug_assert_eq!(outer * len * inner, out.len());
    Tensor::new(x.shape(), out)
}

/// Adjoint of softmax given its output `y` and upstream gradient `g`.
pub(crate) fn softmax_backward(y: &Tensor, g: &Tensor, axis: usize) -> Tensor {
    let (_, len, inner) = axis_split(y.shape(), axis);
    let (ys, gs) = (y.data(), g.data());
    let mut out = vec![0.0; y.len()];
    par::for_chunks_mut(&mut out, len * inner, y.len() * 4, PAR_MIN_WORK, |o, chunk| {
        let base = o * len * inner;
        for i in 0..inner {
            let mut dot = 0.0;
            for j in 0..len {
                let at = base + j * inner + i;
                dot += ys[at] * gs[at];
            }
            for j in 0..len {
                let at = base + j * inner + i;
                chunk[j * inner + i] = ys[at] * (gs[at] - dot);
            }
        }
    });
    Tensor::new(y.shape(), out).expect("softmax grad shape")
}

// ---------------------------------------------------------------------------
// Layer norm

/// Layer-norm intermediates kept for the backward pass.
pub(crate) struct LayerNormCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

/// Normalize over the last axis, then apply `gamma * x + beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    layer_norm_cached(x, gamma, beta, eps).map(|(t, _)| t)
}

pub(crate) fn layer_norm_cached(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, LayerNormCache)> {
    let d = *x.shape().last().ok_or_else(|| Error::invalid("layer_norm", "scalar input"))?;
    if gamma.shape() != [d] {
        return Err(Error::shape("layer_norm", x.shape(), gamma.shape()));
    }
    if beta.shape() != [d] {
        return Err(Error::shape("layer_norm", x.shape(), beta.shape()));
    }
    if eps <= 0.0 {
        return Err(Error::invalid("layer_norm", "eps must be positive"));
    }
    let rows = x.len() / d;
    let (g, b) = (gamma.data(), beta.data());
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x.data()[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            xhat[r * d + j] = h;
            out[r * d + j] = h * g[j] + b[j];
        }
    }
    Ok((Tensor::new(x.shape(), out)?, LayerNormCache { xhat, rstd }))
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn layer_norm_backward(
    cache: &LayerNormCache,
    gamma: &Tensor,
    g: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let d = gamma.len();
    let rows = g.len() / d;
    let gd = g.data();
    let gam = gamma.data();
    let mut dx = vec![0.0; g.len()];
    let mut dgamma = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    let mut dxhat = vec![0.0; d];
    for r in 0..rows {
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let gr = &gd[r * d..(r + 1) * d];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            dgamma[j] += gr[j] * xh[j];
            dbeta[j] += gr[j];
            dxhat[j] = gr[j] * gam[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh[j];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let rs = cache.rstd[r];
        for j in 0..d {
            dx[r * d + j] = rs * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    (
        Tensor::new(g.shape(), dx).expect("dx"),
        Tensor::new(&[d], dgamma).expect("dgamma"),
        Tensor::new(&[d], dbeta).expect("dbeta"),
    )
}

// ---------------------------------------------------------------------------
// GELU

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact (erf-based) GELU of one value.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
        + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

// ---------------------------------------------------------------------------
// Spatial rearrangements on [b, h, w, c] grids

fn grid_dims(op: &'static str, x: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [b, h, w, c] => Ok((b, h, w, c)),
        _ => Err(Error::invalid(op, format!("expected [b, h, w, c], got {:?}", x.shape()))),
    }
}

/// Toroidal roll along the two spatial axes: element `(i, j)` moves to
/// `((i + dy) mod h, (j + dx) mod w)`.
pub fn roll2d(x: &Tensor, dy: isize, dx: isize) -> Result<Tensor> {
    let (b, h, w, c) = grid_dims("roll2d", x)?;
    let sy = dy.rem_euclid(h as isize) as usize;
    let sx = dx.rem_euclid(w as isize) as usize;
    let src = x.data();
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for i in 0..h {
            let oi = (i + sy) % h;
            for j in 0..w {
                let oj = (j + sx) % w;
                let s = ((bi * h + i) * w + j) * c;
                let d = ((bi * h + oi) * w + oj) * c;
                out[d..d + c].copy_from_slice(&src[s..s + c]);
            }
        }
    }
    Tensor::new(x.shape(), out)
}

/// 3x3 zero-padded patch extraction: `[b, h, w, c] -> [b, h, w, 9c]` with
/// column `(dy * 3 + dx) * c + ci` reading pixel `(i + dy - 1, j + dx - 1)`.
pub fn im2col3x3(x: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = grid_dims("im2col3x3", x)?;
    let src = x.data();
    let mut out = vec![0.0; x.len() * 9];
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                let d0 = ((bi * h + i) * w + j) * 9 * c;
                for dy in 0..3 {
                    let si = i as isize + dy as isize - 1;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    for dx in 0..3 {
                        let sj = j as isize + dx as isize - 1;
                        if sj < 0 || sj >= w as isize {
                            continue;
                        }
                        let s = ((bi * h + si as usize) * w + sj as usize) * c;
                        let d = d0 + (dy * 3 + dx) * c;
                        out[d..d + c].copy_from_slice(&src[s..s + c]);
                    }
                }
            }
        }
    }
    Tensor::new(&[b, h, w, 9 * c], out)
}

/// Adjoint of [`im2col3x3`].
pub(crate) fn col2im3x3(g: &Tensor, c: usize) -> Tensor {
    let (b, h, w) = (g.shape()[0], g.shape()[1], g.shape()[2]);
    let src = g.data();
    let mut out = vec![0.0; b * h * w * c];
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                let s0 = ((bi * h + i) * w + j) * 9 * c;
                for dy in 0..3 {
                    let si = i as isize + dy as isize - 1;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    for dx in 0..3 {
                        let sj = j as isize + dx as isize - 1;
                        if sj < 0 || sj >= w as isize {
                            continue;
                        }
                        let d = ((bi * h + si as usize) * w + sj as usize) * c;
                        let s = s0 + (dy * 3 + dx) * c;
                        for ci in 0..c {
                            out[d + ci] += src[s + ci];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[b, h, w, c], out).expect("col2im shape")
}

/// Separable "valid" filtering of a `[b, h, w, c]` grid with the 1-D kernel
/// `k` applied along both spatial axes (no padding; output shrinks by
/// `k.len() - 1` per axis).
pub fn blur_valid(x: &Tensor, k: &[f64]) -> Result<Tensor> {
    let (b, h, w, c) = grid_dims("blur_valid", x)?;
    let kl = k.len();
    if kl == 0 || h < kl || w < kl {
        return Err(Error::invalid(
            "blur_valid",
            format!("{h}x{w} grid is smaller than the {kl}-tap window"),
        ));
    }
    let (oh, ow) = (h - kl + 1, w - kl + 1);
    let src = x.data();
    // horizontal pass: [b, h, ow, c]
    let mut tmp = vec![0.0; b * h * ow * c];
    for bi in 0..b {
        for i in 0..h {
            for j in 0..ow {
                let d = ((bi * h + i) * ow + j) * c;
                for (u, &kv) in k.iter().enumerate() {
                    let s = ((bi * h + i) * w + j + u) * c;
                    for ci in 0..c {
                        tmp[d + ci] += kv * src[s + ci];
                    }
                }
            }
        }
    }
    // vertical pass: [b, oh, ow, c]
    let mut out = vec![0.0; b * oh * ow * c];
    for bi in 0..b {
        for i in 0..oh {
            for (u, &kv) in k.iter().enumerate() {
                let s0 = (bi * h + i + u) * ow * c;
                let d0 = (bi * oh + i) * ow * c;
                for t in 0..ow * c {
                    out[d0 + t] += kv * tmp[s0 + t];
                }
            }
        }
    }
    Tensor::new(&[b, oh, ow, c], out)
}

/// Adjoint of [`blur_valid`] back onto an `h x w` grid.
pub(crate) fn blur_valid_adjoint(g: &Tensor, k: &[f64], h: usize, w: usize) -> Tensor {
    let (b, oh, ow, c) = (g.shape()[0], g.shape()[1], g.shape()[2], g.shape()[3]);
    let src = g.data();
    let mut tmp = vec![0.0; b * h * ow * c];
    for bi in 0..b {
        for i in 0..oh {
            for (u, &kv) in k.iter().enumerate() {
                let d0 = (bi * h + i + u) * ow * c;
                let s0 = (bi * oh + i) * ow * c;
                for t in 0..ow * c {
                    tmp[d0 + t] += kv * src[s0 + t];
                }
            }
        }
    }
    let mut out = vec![0.0; b * h * w * c];
    for bi in 0..b {
        for i in 0..h {
            for j in 0..ow {
                let s = ((bi * h + i) * ow + j) * c;
                for (u, &kv) in k.iter().enumerate() {
                    let d = ((bi * h + i) * w + j + u) * c;
                    for ci in 0..c {
                        out[d + ci] += kv * tmp[s + ci];
                    }
                }
            }
        }
    }
    Tensor::new(&[b, h, w, c], out).expect("blur adjoint shape")
}

// ---------------------------------------------------------------------------
// Slicing and gathering

/// Contiguous slice `start..start + len` along `axis`.
pub fn narrow(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    if axis >= x.rank() || len == 0 || start + len > x.shape()[axis] {
        return Err(Error::invalid(
            "narrow",
            format!("{start}+{len} on axis {axis} of {:?}", x.shape()),
        ));
    }
    let (outer, full, inner) = axis_split(x.shape(), axis);
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * full + start) * inner;
        data.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Tensor::new(&shape, data)
}

/// Adjoint of [`narrow`]: zero-pad `g` back to `full_shape`.
pub(crate) fn narrow_backward(g: &Tensor, full_shape: &[usize], axis: usize, start: usize) -> Tensor {
    let (outer, full, inner) = axis_split(full_shape, axis);
    let len = g.shape()[axis];
    let mut data = vec![0.0; numel(full_shape)];
    for o in 0..outer {
        let dst = (o * full + start) * inner;
        let src = o * len * inner;
        data[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
    }
    Tensor::new(full_shape, data).expect("narrow grad shape")
}

/// Rows of a `[r, c]` table selected by `index`, giving `[index.len(), c]`.
pub fn gather_rows(table: &Tensor, index: &[usize]) -> Result<Tensor> {
    let [r, c] = *table.shape() else {
        return Err(Error::invalid("gather_rows", format!("table must be 2-D, got {:?}", table.shape())));
    };
    if index.is_empty() {
        return Err(Error::invalid("gather_rows", "empty index"));
    }
    let mut data = Vec::with_capacity(index.len() * c);
    for &i in index {
        if i >= r {
            return Err(Error::invalid("gather_rows", format!("row {i} out of {r}")));
        }
        data.extend_from_slice(&table.data()[i * c..(i + 1) * c]);
    }
    Tensor::new(&[index.len(), c], data)
}

pub(crate) fn scatter_rows(g: &Tensor, index: &[usize], rows: usize) -> Tensor {
    let c = g.shape()[1];
    let mut data = vec![0.0; rows * c];
    for (k, &i) in index.iter().enumerate() {
        for j in 0..c {
            data[i * c + j] += g.data()[k * c + j];
        }
    }
    Tensor::new(&[rows, c], data).expect("scatter shape")
}
