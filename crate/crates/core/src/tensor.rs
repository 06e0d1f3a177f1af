//! Dense row-major f64 tensors and the kernels the engine is built on.
//!
//! Shapes are plain `Vec<usize>`; there are no strides or views. Every
//! payload registers with the allocation ledger on construction and
//! releases on drop. Reductions accumulate in a fixed sequential order
//! (ascending innermost index), and the parallel paths only split work
//! across independent output rows, so results are bitwise identical
//! whatever the thread count.

use crate::error::{Error, Result};
use crate::ledger::{self, AllocTag};
use crate::rng::StreamRng;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Minimum multiply-accumulate count before a kernel fans out to rayon.
/// Below this the dispatch overhead dominates.
#[cfg(feature = "parallel")]
const PAR_MIN_WORK: usize = 16_384;

#[cfg(feature = "parallel")]
fn should_par(work: usize) -> bool {
    work >= PAR_MIN_WORK && rayon::current_num_threads() > 1
}

/// Run `f(row_index, row)` over consecutive `row_len` chunks of `data`,
/// in parallel when the total work justifies it. Each row is written by
/// exactly one invocation, so scheduling cannot change results.
pub(crate) fn for_each_row<F>(data: &mut [f64], row_len: usize, work: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if row_len == 0 || data.is_empty() {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        if should_par(work) {
            data.par_chunks_mut(row_len)
                .enumerate()
                .for_each(|(i, row)| f(i, row));
            return;
        }
    }
    let _ = work;
    for (i, row) in data.chunks_mut(row_len).enumerate() {
        f(i, row);
    }
}

/// Dense row-major tensor. The ledger tag records what role the payload
/// plays (activation cache, per-sample gradient, ...) for memory audits.
#[derive(Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    tag: AllocTag,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::zeros_tagged(shape, AllocTag::General)
    }

    pub fn zeros_tagged(shape: &[usize], tag: AllocTag) -> Tensor {
        let numel: usize = shape.iter().product();
        ledger::alloc(tag, (numel * 8) as u64);
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            tag,
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Tensor::from_vec_tagged(shape, data, AllocTag::General)
    }

    pub fn from_vec_tagged(shape: &[usize], data: Vec<f64>, tag: AllocTag) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} implies {} elements, data has {}",
                shape,
                numel,
                data.len()
            )));
        }
        ledger::alloc(tag, (numel * 8) as u64);
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            tag,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn tag(&self) -> AllocTag {
        self.tag
    }

    /// Move this payload's ledger bytes to a different tag.
    pub fn retag(&mut self, tag: AllocTag) {
        if tag != self.tag {
            let bytes = (self.data.len() * 8) as u64;
            ledger::release(self.tag, bytes);
            ledger::alloc(tag, bytes);
            self.tag = tag;
        }
    }

    pub fn clone_tagged(&self, tag: AllocTag) -> Tensor {
        ledger::alloc(tag, (self.data.len() * 8) as u64);
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            tag,
        }
    }

    /// Reinterpret the shape without touching data. The element count must
    /// be preserved.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {} elements into {:?}",
                self.data.len(),
                shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Element access by full index; test and small-path convenience.
    pub fn at(&self, idx: &[usize]) -> f64 {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut flat = 0usize;
        for (i, &d) in idx.iter().zip(self.shape.iter()) {
            debug_assert!(*i < d);
            flat = flat * d + i;
        }
        self.data[flat]
    }

    /// Sum of squared entries, accumulated in index order.
    pub fn frobenius_sq(&self) -> f64 {
        let mut acc = 0.0;
        for v in &self.data {
            acc += v * v;
        }
        acc
    }
}

impl Clone for Tensor {
    fn clone(&self) -> Tensor {
        self.clone_tagged(self.tag)
    }
}

impl Drop for Tensor {
    fn drop(&mut self) {
        ledger::release(self.tag, (self.data.len() * 8) as u64);
    }
}

/// Interpret a tensor as batched rows: rank-3 `B x T x d` or rank-2 `T x d`
/// treated as `B = 1`. Returns (B, T, d).
fn as_batched(x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [t, d] => Ok((1, t, d)),
        [b, t, d] => Ok((b, t, d)),
        ref s => Err(Error::Dimension(format!(
            "expected rank 2 or 3 tensor, got shape {s:?}"
        ))),
    }
}

/// Batched matrix product `a @ w`: `(B x T x d) @ (d x p) -> B x T x p`.
/// Rank-2 `a` is treated as `B = 1` and yields a rank-2 result.
pub fn matmul(a: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (b, t, d) = as_batched(a)?;
    let (wd, p) = match *w.shape() {
        [wd, p] => (wd, p),
        ref s => {
            return Err(Error::Dimension(format!(
                "matmul weight must be rank 2, got {s:?}"
            )))
        }
    };
    if d != wd {
        return Err(Error::Dimension(format!(
            "matmul inner dims differ: a is {:?}, w is {:?}",
            a.shape(),
            w.shape()
        )));
    }
    let out_shape: Vec<usize> = if a.rank() == 2 {
        vec![t, p]
    } else {
        vec![b, t, p]
    };
    let mut out = Tensor::zeros(&out_shape);
    let aw = a.data();
    let ww = w.data();
    for_each_row(out.data_mut(), p, b * t * d * p, |row, o| {
        let arow = &aw[row * d..(row + 1) * d];
        for (k, &av) in arow.iter().enumerate() {
            let wrow = &ww[k * p..(k + 1) * p];
            for (oj, wv) in o.iter_mut().zip(wrow.iter()) {
                *oj += av * wv;
            }
        }
    });
    Ok(out)
}

/// Batched product against the transpose: `g @ w^T`:
/// `(B x T x p) @ (d x p)^T -> B x T x d`. Used to push gradients upstream.
pub(crate) fn matmul_nt(g: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (b, t, p) = as_batched(g)?;
    let (d, wp) = match *w.shape() {
        [d, p2] => (d, p2),
        ref s => {
            return Err(Error::Dimension(format!(
                "matmul_nt weight must be rank 2, got {s:?}"
            )))
        }
    };
    if p != wp {
        return Err(Error::Dimension(format!(
            "matmul_nt inner dims differ: g is {:?}, w is {:?}",
            g.shape(),
            w.shape()
        )));
    }
    let out_shape: Vec<usize> = if g.rank() == 2 {
        vec![t, d]
    } else {
        vec![b, t, d]
    };
    let mut out = Tensor::zeros(&out_shape);
    let gw = g.data();
    let ww = w.data();
    for_each_row(out.data_mut(), d, b * t * d * p, |row, o| {
        let grow = &gw[row * p..(row + 1) * p];
        for (k, ok) in o.iter_mut().enumerate() {
            let wrow = &ww[k * p..(k + 1) * p];
            let mut acc = 0.0;
            for (gv, wv) in grow.iter().zip(wrow.iter()) {
                acc += gv * wv;
            }
            *ok = acc;
        }
    });
    Ok(out)
}

/// Accumulate `a^T @ g` for one sample into `out` (`d x p`), scaled by
/// `weight`. `a` is `T x d`, `g` is `T x p`; each output entry sums over
/// `t` in ascending order regardless of the loop nest used by callers.
pub(crate) fn accumulate_atg(a: &[f64], g: &[f64], t: usize, d: usize, p: usize, weight: f64, out: &mut [f64]) {
    debug_assert_eq!(a.len(), t * d);
    debug_assert_eq!(g.len(), t * p);
    debug_assert_eq!(out.len(), d * p);
    for ti in 0..t {
        let arow = &a[ti * d..(ti + 1) * d];
        let grow = &g[ti * p..(ti + 1) * p];
        for (k, &ak) in arow.iter().enumerate() {
            let s = weight * ak;
            let orow = &mut out[k * p..(k + 1) * p];
            for (ov, gv) in orow.iter_mut().zip(grow.iter()) {
                *ov += s * gv;
            }
        }
    }
}

/// Add a length-`p` bias vector to every row of `s` (`... x p`), in place.
pub fn add_bias(s: &mut Tensor, bias: &Tensor) -> Result<()> {
    let p = *s.shape().last().ok_or_else(|| {
        Error::Dimension("add_bias target must have at least rank 1".into())
    })?;
    if bias.shape() != [p] {
        return Err(Error::Dimension(format!(
            "bias shape {:?} does not match last dim {} of {:?}",
            bias.shape(),
            p,
            s.shape()
        )));
    }
    let bd = bias.data().to_vec();
    for row in s.data_mut().chunks_mut(p) {
        for (sv, bv) in row.iter_mut().zip(bd.iter()) {
            *sv += bv;
        }
    }
    Ok(())
}

/// Reduce `B x T x p` over the middle axis to `B x p`, summing `t` in
/// ascending order. This is the per-sample bias gradient kernel.
pub fn sum_over_t(g: &Tensor) -> Result<Tensor> {
    sum_over_t_tagged(g, AllocTag::General)
}

pub fn sum_over_t_tagged(g: &Tensor, tag: AllocTag) -> Result<Tensor> {
    let (b, t, p) = match *g.shape() {
        [b, t, p] => (b, t, p),
        ref s => {
            return Err(Error::Dimension(format!(
                "sum_over_t expects rank 3, got {s:?}"
            )))
        }
    };
    let mut out = Tensor::zeros_tagged(&[b, p], tag);
    let gd = g.data();
    for_each_row(out.data_mut(), p, b * t * p, |bi, o| {
        for ti in 0..t {
            let grow = &gd[(bi * t + ti) * p..(bi * t + ti + 1) * p];
            for (ov, gv) in o.iter_mut().zip(grow.iter()) {
                *ov += gv;
            }
        }
    });
    Ok(out)
}

/// Output spatial size of a padded strided sliding window.
fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if kernel == 0 || stride == 0 {
        return Err(Error::Parameter(
            "kernel and stride must be positive".into(),
        ));
    }
    if padded < kernel {
        return Err(Error::Dimension(format!(
            "kernel {kernel} exceeds padded input {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// im2col: lower `B x C x H x W` to `B x T x d` patch rows with
/// `T = oH * oW` and `d = C * kH * kW`. Row `t = oy * oW + ox` holds patch
/// `(oy, ox)`; column `c * kH * kW + i * kW + j` holds input channel `c`,
/// kernel offset `(i, j)`. Out-of-bounds positions read as zero padding.
/// Returns the lowered tensor and `(oH, oW)`.
pub fn unfold2d(
    x: &Tensor,
    kernel: (usize, usize),
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<(Tensor, (usize, usize))> {
    unfold2d_tagged(x, kernel, stride, padding, AllocTag::General)
}

pub fn unfold2d_tagged(
    x: &Tensor,
    kernel: (usize, usize),
    stride: (usize, usize),
    padding: (usize, usize),
    tag: AllocTag,
) -> Result<(Tensor, (usize, usize))> {
    let (b, c, h, w) = match *x.shape() {
        [b, c, h, w] => (b, c, h, w),
        ref s => {
            return Err(Error::Dimension(format!(
                "unfold2d expects rank 4 (B x C x H x W), got {s:?}"
            )))
        }
    };
    let (kh, kw) = kernel;
    let (sh, sw) = stride;
    let (ph, pw) = padding;
    let oh = conv_out_dim(h, kh, sh, ph)?;
    let ow = conv_out_dim(w, kw, sw, pw)?;
    let t = oh * ow;
    let d = c * kh * kw;
    let mut out = Tensor::zeros_tagged(&[b, t, d], tag);
    let xd = x.data();
    for_each_row(out.data_mut(), d, b * t * d, |row, o| {
        let bi = row / t;
        let ti = row % t;
        let oy = ti / ow;
        let ox = ti % ow;
        for ci in 0..c {
            for i in 0..kh {
                let y = (oy * sh + i) as isize - ph as isize;
                for j in 0..kw {
                    let xj = (ox * sw + j) as isize - pw as isize;
                    let col = ci * kh * kw + i * kw + j;
                    if y >= 0 && (y as usize) < h && xj >= 0 && (xj as usize) < w {
                        o[col] = xd[((bi * c + ci) * h + y as usize) * w + xj as usize];
                    }
                }
            }
        }
    });
    Ok((out, (oh, ow)))
}

/// col2im: the adjoint of `unfold2d`. Scatter-adds patch-row gradients
/// (`B x T x d`) back onto an image gradient (`B x C x H x W`).
pub(crate) fn fold2d_acc(
    gu: &Tensor,
    channels: usize,
    height: usize,
    width: usize,
    kernel: (usize, usize),
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<Tensor> {
    let (b, t, d) = match *gu.shape() {
        [b, t, d] => (b, t, d),
        ref s => {
            return Err(Error::Dimension(format!(
                "fold2d_acc expects rank 3, got {s:?}"
            )))
        }
    };
    let (kh, kw) = kernel;
    let (sh, sw) = stride;
    let (ph, pw) = padding;
    let oh = conv_out_dim(height, kh, sh, ph)?;
    let ow = conv_out_dim(width, kw, sw, pw)?;
    if t != oh * ow || d != channels * kh * kw {
        return Err(Error::Dimension(format!(
            "fold2d_acc shape {:?} inconsistent with image {}x{}x{} kernel {:?}",
            gu.shape(),
            channels,
            height,
            width,
            kernel
        )));
    }
    let mut out = Tensor::zeros(&[b, channels, height, width]);
    let gd = gu.data();
    // Patches overlap, so scatter rows sequentially per sample; samples are
    // independent and could fan out, but the batch loop stays serial to keep
    // write ownership obvious.
    for bi in 0..b {
        let img = &mut out.data_mut()[bi * channels * height * width..(bi + 1) * channels * height * width];
        for ti in 0..t {
            let oy = ti / ow;
            let ox = ti % ow;
            let grow = &gd[(bi * t + ti) * d..(bi * t + ti + 1) * d];
            for ci in 0..channels {
                for i in 0..kh {
                    let y = (oy * sh + i) as isize - ph as isize;
                    if y < 0 || y as usize >= height {
                        continue;
                    }
                    for j in 0..kw {
                        let xj = (ox * sw + j) as isize - pw as isize;
                        if xj < 0 || xj as usize >= width {
                            continue;
                        }
                        img[(ci * height + y as usize) * width + xj as usize] +=
                            grow[ci * kh * kw + i * kw + j];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Tensor of N(mean, std^2) draws, filled in row-major order from `rng`.
pub fn gaussian(shape: &[usize], mean: f64, std: f64, rng: &mut StreamRng) -> Result<Tensor> {
    if !(std >= 0.0) || !std.is_finite() || !mean.is_finite() {
        return Err(Error::Parameter(format!(
            "gaussian requires finite mean and std >= 0, got mean {mean}, std {std}"
        )));
    }
    let mut out = Tensor::zeros(shape);
    rng.fill_gaussian(out.data_mut(), mean, std);
    Ok(out)
}
