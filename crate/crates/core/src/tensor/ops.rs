use rand::Rng;

use super::tape::{grad_buf, ConvGeom, Node, NormGeom, Op, Tape, Var};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

fn dims2(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::Dimension(format!(
            "{what} expects a rank-2 tensor, got shape {shape:?}"
        ))),
    }
}

fn same_shape(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Dimension(format!(
            "{what}: shapes {a:?} and {b:?} differ"
        )));
    }
    Ok(())
}

fn normalize_rows<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    geom: NormGeom,
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let NormGeom {
        rows,
        len,
        affine_per_row,
    } = geom;
    let n = T::from_usize(len).unwrap();
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &x[r * len..(r + 1) * len];
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let is = T::one() / (var + eps).sqrt();
        inv_std[r] = is;
        for j in 0..len {
            let h = (row[j] - mean) * is;
            xhat[r * len + j] = h;
            let p = if affine_per_row { r } else { j };
            out[r * len + j] = gamma[p] * h + beta[p];
        }
    }
    (out, xhat, inv_std)
}

impl<'a, T: Scalar> Tape<'a, T> {
    /// `[m x k] . [k x n] -> [m x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.shape(a), "matmul")?;
        let (k2, n) = dims2(self.shape(b), "matmul")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul: inner extents differ for shapes {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            false,
            false,
            m,
            k,
            n,
            self.value(a).data(),
            self.value(b).data(),
            T::zero(),
            &mut out,
        );
        self.push(Tensor::new([m, n], out)?, Op::MatMul { a, b })
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = dims2(self.shape(a), "transpose")?;
        let src = self.value(a).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push(Tensor::new([c, r], out)?, Op::Transpose { a })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.shape(a), self.shape(b), "add")?;
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, out)?, Op::Add { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.shape(a), self.shape(b), "mul")?;
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, out)?, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let out: Vec<T> = self.value(a).data().iter().map(|&x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, out)?, Op::Scale { a, factor })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, out)?, Op::Relu { a })
    }

    /// Adds a length-`n` bias to every row of an `[m x n]` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = dims2(self.shape(a), "add_bias")?;
        if self.shape(bias) != [n] {
            return Err(Error::Dimension(format!(
                "add_bias: bias shape {:?} does not match row length of {:?}",
                self.shape(bias),
                self.shape(a)
            )));
        }
        let b = self.value(bias).data();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(n) {
            row.iter_mut().zip(b).for_each(|(o, &bv)| *o = *o + bv);
        }
        self.push(Tensor::new([m, n], out)?, Op::AddBias { a, bias })
    }

    /// Softmax along the last axis, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = *shape
            .last()
            .filter(|&&n| n > 0)
            .ok_or_else(|| Error::Dimension(format!("softmax on shape {shape:?}")))?;
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        self.push(Tensor::new(shape, out)?, Op::Softmax { a })
    }

    /// Normalizes each length-`d` row over the last axis, then applies the
    /// per-column affine `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape
            .last()
            .filter(|&&d| d > 0)
            .ok_or_else(|| Error::Dimension(format!("layer_norm on shape {shape:?}")))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Dimension(format!(
                "layer_norm: gamma {:?} / beta {:?} must both be [{d}]",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let geom = NormGeom {
            rows: self.value(x).numel() / d,
            len: d,
            affine_per_row: false,
        };
        self.norm(x, gamma, beta, eps, shape, geom)
    }

    /// Per-channel normalization of a `[C x H x W]` map over its `H x W`
    /// positions, with per-channel gain and bias.
    pub fn channel_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [c, h, w] = shape[..] else {
            return Err(Error::Dimension(format!(
                "channel_norm expects [C, H, W], got {shape:?}"
            )));
        };
        if h * w == 0 || self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Dimension(format!(
                "channel_norm: input {shape:?}, gamma {:?}, beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let geom = NormGeom {
            rows: c,
            len: h * w,
            affine_per_row: true,
        };
        self.norm(x, gamma, beta, eps, shape, geom)
    }

    fn norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
        shape: Vec<usize>,
        geom: NormGeom,
    ) -> Result<Var> {
        let (out, xhat, inv_std) = normalize_rows(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            geom,
            eps,
        );
        self.push(
            Tensor::new(shape, out)?,
            Op::Norm {
                x,
                gamma,
                beta,
                geom,
                xhat,
                inv_std,
            },
        )
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `p` and survivors are scaled by `1 / (1 - p)`. Identity
    /// otherwise. The mask comes from `rng` only.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Parameter(format!(
                "dropout probability {p} is outside [0, 1)"
            )));
        }
        if !training || p == 0.0 {
            return Ok(a);
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(a).numel())
            .map(|_| {
                if rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| x * m)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, out)?, Op::Dropout { a, mask })
    }

    /// 2-D convolution of a `[C_in x H x W]` map with `[C_out x C_in x kh x kw]`
    /// kernels, zero padding, no bias.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let ([c_in, h, wd], [c_out, c_in2, kh, kw]) = (&xs[..], &ws[..]) else {
            return Err(Error::Dimension(format!(
                "conv2d expects input [C, H, W] and kernel [O, C, kh, kw], got {xs:?} and {ws:?}"
            )));
        };
        let (c_in, h, wd, c_out, kh, kw) = (*c_in, *h, *wd, *c_out, *kh, *kw);
        if c_in != *c_in2 {
            return Err(Error::Dimension(format!(
                "conv2d: input channels {c_in} do not match kernel {ws:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::Parameter("conv2d stride must be at least 1".into()));
        }
        if kh == 0 || kw == 0 || kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(Error::Dimension(format!(
                "conv2d: kernel {kh}x{kw} does not fit input {h}x{wd} with padding {pad}"
            )));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let geom = ConvGeom {
            c_in,
            h,
            w: wd,
            c_out,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        };
        let cols = im2col(self.value(x).data(), &geom);
        let ck = c_in * kh * kw;
        let mut out = vec![T::zero(); c_out * oh * ow];
        T::gemm(
            false,
            false,
            c_out,
            ck,
            oh * ow,
            self.value(w).data(),
            &cols,
            T::zero(),
            &mut out,
        );
        self.push(
            Tensor::new([c_out, oh, ow], out)?,
            Op::Conv2d { x, w, geom, cols },
        )
    }

    /// `[C x H x W] -> [C]`, the mean of each channel.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let [c, h, w] = shape[..] else {
            return Err(Error::Dimension(format!(
                "global_avg_pool expects [C, H, W], got {shape:?}"
            )));
        };
        if h * w == 0 {
            return Err(Error::Dimension(format!(
                "global_avg_pool on empty spatial extent {shape:?}"
            )));
        }
        let n = T::from_usize(h * w).unwrap();
        let out: Vec<T> = self
            .value(a)
            .data()
            .chunks(h * w)
            .map(|ch| ch.iter().copied().sum::<T>() / n)
            .collect();
        self.push(Tensor::new([c], out)?, Op::GlobalAvgPool { a })
    }

    /// Gathers rows of a `[V x d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = dims2(self.shape(table), "embedding_lookup")?;
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::Index { id: bad, rows: v });
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        self.push(
            Tensor::new([ids.len(), d], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Concatenates along the last axis. All parts need the same rank and the
    /// same leading extents.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Dimension("concat of zero tensors".into()));
        };
        let lead = self.shape(first)[..self.shape(first).len().saturating_sub(1)].to_vec();
        let rank = self.shape(first).len();
        if rank == 0 {
            return Err(Error::Dimension("concat of rank-0 tensors".into()));
        }
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != rank || s[..rank - 1] != lead[..] {
                return Err(Error::Dimension(format!(
                    "concat: shape {s:?} is incompatible with {:?}",
                    self.shape(first)
                )));
            }
            widths.push(s[rank - 1]);
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
            },
        )
    }

    /// Columns `start..start + len` of an `[m x n]` matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = dims2(self.shape(a), "slice_cols")?;
        if start + len > n {
            return Err(Error::Dimension(format!(
                "slice_cols {start}..{} out of range for {n} columns",
                start + len
            )));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        self.push(Tensor::new([m, len], out)?, Op::SliceCols { a, start })
    }

    /// Row `row` of an `[m x n]` matrix as a rank-1 tensor.
    pub fn select_row(&mut self, a: Var, row: usize) -> Result<Var> {
        let (m, n) = dims2(self.shape(a), "select_row")?;
        if row >= m {
            return Err(Error::Dimension(format!(
                "select_row {row} out of range for {m} rows"
            )));
        }
        let out = self.value(a).data()[row * n..(row + 1) * n].to_vec();
        self.push(Tensor::new([n], out)?, Op::SelectRow { a, row })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape.to_vec())?;
        self.push(out, Op::Reshape { a })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum { a })
    }

    /// Mean cross-entropy of `[B x C]` logits against integer labels,
    /// computed through log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = dims2(self.shape(logits), "cross_entropy")?;
        if b == 0 || b != labels.len() {
            return Err(Error::Dimension(format!(
                "cross_entropy: {b} logit rows but {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Label(bad));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = T::zero();
        for (row, &y) in probs.chunks_mut(c).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
            total = total + (lse - row[y]);
            softmax_in_place(row);
        }
        let loss = total / T::from_usize(b).unwrap();
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z = z + *v;
    }
    for v in row.iter_mut() {
        *v = *v / z;
    }
}

/// Output columns `ox` whose input column `ox * stride + k - pad` falls
/// inside `[0, w)`.
fn valid_range(k: usize, pad: usize, stride: usize, w: usize, ow: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k).div_ceil(stride);
    if w + pad <= k {
        return (0, 0);
    }
    let hi = ((w - 1 + pad - k) / stride + 1).min(ow);
    (lo.min(hi), hi)
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let n = g.oh * g.ow;
    let mut cols = vec![T::zero(); g.c_in * g.kh * g.kw * n];
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (y_lo, y_hi) = valid_range(ki, g.pad, g.stride, g.h, g.oh);
            for kj in 0..g.kw {
                let (x_lo, x_hi) = valid_range(kj, g.pad, g.stride, g.w, g.ow);
                let r = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[r * n..(r + 1) * n];
                for oy in y_lo..y_hi {
                    let iy = oy * g.stride + ki - g.pad;
                    let src_row = &plane[iy * g.w..(iy + 1) * g.w];
                    let dst_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    let ix0 = x_lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        dst_row[x_lo..x_hi].copy_from_slice(&src_row[ix0..ix0 + x_hi - x_lo]);
                    } else {
                        for (d, s) in dst_row[x_lo..x_hi]
                            .iter_mut()
                            .zip(src_row[ix0..].iter().step_by(g.stride))
                        {
                            *d = *s;
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let n = g.oh * g.ow;
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (y_lo, y_hi) = valid_range(ki, g.pad, g.stride, g.h, g.oh);
            for kj in 0..g.kw {
                let (x_lo, x_hi) = valid_range(kj, g.pad, g.stride, g.w, g.ow);
                let r = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[r * n..(r + 1) * n];
                for oy in y_lo..y_hi {
                    let iy = oy * g.stride + ki - g.pad;
                    let dst_row = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let src_row = &src[oy * g.ow + x_lo..oy * g.ow + x_hi];
                    let ix0 = x_lo * g.stride + kj - g.pad;
                    for (d, &s) in dst_row[ix0..]
                        .iter_mut()
                        .step_by(g.stride)
                        .zip(src_row)
                    {
                        *d = *d + s;
                    }
                }
            }
        }
    }
}

/// Propagates the output gradient `g` of node `i` into its inputs.
pub(super) fn backward_node<T: Scalar>(
    nodes: &[Node<'_, T>],
    grads: &mut [Option<Vec<T>>],
    i: usize,
    g: &[T],
    fault: bool,
) {
    let wants = |v: Var| nodes[v.0].requires_grad;
    let val = |v: Var| nodes[v.0].value.data();
    let numel = |v: Var| nodes[v.0].value.numel();

    match &nodes[i].op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
            let n = nodes[b.0].value.shape()[1];
            if wants(*a) {
                let da = grad_buf(grads, *a, m * k);
                if fault {
                    let mut tmp = vec![T::zero(); m * k];
                    T::gemm(false, true, m, n, k, g, val(*b), T::zero(), &mut tmp);
                    let skew = T::from_f64_lossy(1.01);
                    da.iter_mut().zip(tmp).for_each(|(d, t)| *d = *d + t * skew);
                } else {
                    T::gemm(false, true, m, n, k, g, val(*b), T::one(), da);
                }
            }
            if wants(*b) {
                let db = grad_buf(grads, *b, k * n);
                T::gemm(true, false, k, m, n, val(*a), g, T::one(), db);
            }
        }
        Op::Transpose { a } => {
            if wants(*a) {
                let s = nodes[a.0].value.shape();
                let (r, c) = (s[0], s[1]);
                let da = grad_buf(grads, *a, r * c);
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] = da[i * c + j] + g[j * r + i];
                    }
                }
            }
        }
        Op::Add { a, b } => {
            for v in [*a, *b] {
                if wants(v) {
                    let dv = grad_buf(grads, v, g.len());
                    dv.iter_mut().zip(g).for_each(|(d, &x)| *d = *d + x);
                }
            }
        }
        Op::Mul { a, b } => {
            for (v, other) in [(*a, *b), (*b, *a)] {
                if wants(v) {
                    let o = val(other);
                    let dv = grad_buf(grads, v, g.len());
                    for ((d, &x), &y) in dv.iter_mut().zip(g).zip(o) {
                        *d = *d + x * y;
                    }
                }
            }
        }
        Op::Scale { a, factor } => {
            if wants(*a) {
                let da = grad_buf(grads, *a, g.len());
                da.iter_mut().zip(g).for_each(|(d, &x)| *d = *d + x * *factor);
            }
        }
        Op::Relu { a } => {
            if wants(*a) {
                let input = val(*a);
                let da = grad_buf(grads, *a, g.len());
                for ((d, &x), &inp) in da.iter_mut().zip(g).zip(input) {
                    if inp > T::zero() {
                        *d = *d + x;
                    }
                }
            }
        }
        Op::AddBias { a, bias } => {
            if wants(*a) {
                let da = grad_buf(grads, *a, g.len());
                da.iter_mut().zip(g).for_each(|(d, &x)| *d = *d + x);
            }
            if wants(*bias) {
                let n = numel(*bias);
                let db = grad_buf(grads, *bias, n);
                for row in g.chunks(n) {
                    db.iter_mut().zip(row).for_each(|(d, &x)| *d = *d + x);
                }
            }
        }
        Op::Softmax { a } => {
            if wants(*a) {
                let y = nodes[i].value.data();
                let n = *nodes[i].value.shape().last().unwrap();
                let da = grad_buf(grads, *a, g.len());
                for ((drow, grow), yrow) in da.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                    let dot: T = grow.iter().zip(yrow).map(|(&gv, &yv)| gv * yv).sum();
                    for ((d, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d = *d + yv * (gv - dot);
                    }
                }
            }
        }
        Op::Norm {
            x,
            gamma,
            beta,
            geom,
            xhat,
            inv_std,
        } => {
            let NormGeom {
                rows,
                len,
                affine_per_row,
            } = *geom;
            let gam = val(*gamma);
            let pidx = |r: usize, j: usize| if affine_per_row { r } else { j };
            if wants(*x) {
                let n = T::from_usize(len).unwrap();
                let dx = grad_buf(grads, *x, rows * len);
                let mut gh = vec![T::zero(); len];
                for r in 0..rows {
                    let off = r * len;
                    let mut mean_g = T::zero();
                    let mut mean_gx = T::zero();
                    for j in 0..len {
                        gh[j] = g[off + j] * gam[pidx(r, j)];
                        mean_g = mean_g + gh[j];
                        mean_gx = mean_gx + gh[j] * xhat[off + j];
                    }
                    mean_g = mean_g / n;
                    mean_gx = mean_gx / n;
                    for j in 0..len {
                        dx[off + j] = dx[off + j]
                            + inv_std[r] * (gh[j] - mean_g - xhat[off + j] * mean_gx);
                    }
                }
            }
            if wants(*gamma) {
                let dg = grad_buf(grads, *gamma, gam.len());
                for r in 0..rows {
                    for j in 0..len {
                        let p = pidx(r, j);
                        dg[p] = dg[p] + g[r * len + j] * xhat[r * len + j];
                    }
                }
            }
            if wants(*beta) {
                let db = grad_buf(grads, *beta, gam.len());
                for r in 0..rows {
                    for j in 0..len {
                        let p = pidx(r, j);
                        db[p] = db[p] + g[r * len + j];
                    }
                }
            }
        }
        Op::Dropout { a, mask } => {
            if wants(*a) {
                let da = grad_buf(grads, *a, g.len());
                for ((d, &x), &m) in da.iter_mut().zip(g).zip(mask) {
                    *d = *d + x * m;
                }
            }
        }
        Op::Conv2d { x, w, geom, cols } => {
            let ck = geom.c_in * geom.kh * geom.kw;
            let n = geom.oh * geom.ow;
            if wants(*w) {
                let dw = grad_buf(grads, *w, geom.c_out * ck);
                T::gemm(false, true, geom.c_out, n, ck, g, cols, T::one(), dw);
            }
            if wants(*x) {
                let mut dcols = vec![T::zero(); ck * n];
                T::gemm(true, false, ck, geom.c_out, n, val(*w), g, T::zero(), &mut dcols);
                let dx = grad_buf(grads, *x, geom.c_in * geom.h * geom.w);
                col2im_add(&dcols, geom, dx);
            }
        }
        Op::GlobalAvgPool { a } => {
            if wants(*a) {
                let s = nodes[a.0].value.shape();
                let hw = s[1] * s[2];
                let inv = T::one() / T::from_usize(hw).unwrap();
                let da = grad_buf(grads, *a, s[0] * hw);
                for (ch, &gv) in da.chunks_mut(hw).zip(g) {
                    ch.iter_mut().for_each(|d| *d = *d + gv * inv);
                }
            }
        }
        Op::Embedding { table, ids } => {
            if wants(*table) {
                let d = nodes[table.0].value.shape()[1];
                let dt = grad_buf(grads, *table, numel(*table));
                for (row, &id) in g.chunks(d).zip(ids) {
                    let dst = &mut dt[id * d..(id + 1) * d];
                    dst.iter_mut().zip(row).for_each(|(t, &x)| *t = *t + x);
                }
            }
        }
        Op::Concat { parts } => {
            let total = *nodes[i].value.shape().last().unwrap();
            let rows = if total == 0 { 0 } else { g.len() / total };
            let mut offset = 0;
            for &p in parts {
                let w = *nodes[p.0].value.shape().last().unwrap();
                if wants(p) {
                    let dp = grad_buf(grads, p, rows * w);
                    for r in 0..rows {
                        let src = &g[r * total + offset..r * total + offset + w];
                        let dst = &mut dp[r * w..(r + 1) * w];
                        dst.iter_mut().zip(src).for_each(|(d, &x)| *d = *d + x);
                    }
                }
                offset += w;
            }
        }
        Op::SliceCols { a, start } => {
            if wants(*a) {
                let n = nodes[a.0].value.shape()[1];
                let len = nodes[i].value.shape()[1];
                let da = grad_buf(grads, *a, numel(*a));
                for (r, row) in g.chunks(len.max(1)).enumerate() {
                    let dst = &mut da[r * n + start..r * n + start + len];
                    dst.iter_mut().zip(row).for_each(|(d, &x)| *d = *d + x);
                }
            }
        }
        Op::SelectRow { a, row } => {
            if wants(*a) {
                let n = g.len();
                let da = grad_buf(grads, *a, numel(*a));
                let dst = &mut da[row * n..(row + 1) * n];
                dst.iter_mut().zip(g).for_each(|(d, &x)| *d = *d + x);
            }
        }
        Op::Reshape { a } => {
            if wants(*a) {
                let da = grad_buf(grads, *a, g.len());
                da.iter_mut().zip(g).for_each(|(d, &x)| *d = *d + x);
            }
        }
        Op::Sum { a } => {
            if wants(*a) {
                let da = grad_buf(grads, *a, numel(*a));
                da.iter_mut().for_each(|d| *d = *d + g[0]);
            }
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            if wants(*logits) {
                let c = nodes[logits.0].value.shape()[1];
                let scale = g[0] / T::from_usize(labels.len()).unwrap();
                let dl = grad_buf(grads, *logits, probs.len());
                for (b, &y) in labels.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == y { T::one() } else { T::zero() };
                        dl[b * c + j] = dl[b * c + j] + (probs[b * c + j] - onehot) * scale;
                    }
                }
            }
        }
    }
}
