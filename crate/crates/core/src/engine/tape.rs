//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends one node holding its output value, its parent
//! handles and whatever activations its backward rule needs. Nodes are
//! appended in evaluation order, so reverse insertion order is a valid
//! topological order for the backward sweep.

use super::conv::{self, ConvGeom};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Identifier of a trainable parameter within a model.
pub type ParamId = usize;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn node_id(self) -> usize {
        self.0
    }
}

/// Batch-norm running statistics (exponential moving averages).
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub momentum: T,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            momentum: T::lit(super::BN_MOMENTUM),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics, running statistics updated.
    Train,
    /// Batch statistics, running statistics left untouched (frozen network).
    TrainFrozen,
    /// Running statistics.
    Eval,
}

/// One supervised-contrastive anchor with its positive and denominator sets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnchorSet {
    pub anchor: usize,
    pub positives: Vec<usize>,
    pub denominator: Vec<usize>,
}

#[derive(Clone, Copy, Debug)]
struct ConvShape {
    stride: usize,
    padding: usize,
}

enum Op<T> {
    Leaf,
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        shape: ConvShape,
    },
    TConv1d {
        x: Var,
        w: Var,
        b: Var,
        shape: ConvShape,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    ChannelMean {
        x: Var,
    },
    ChannelStd {
        x: Var,
        mean: Vec<T>,
    },
    Standardize {
        x: Var,
        mu: Var,
        sigma: Var,
    },
    ChannelAffine {
        x: Var,
        scale: Var,
        shift: Var,
    },
    Softplus {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Concat {
        parts: Vec<Var>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    GlobalAvgPool {
        x: Var,
    },
    L2Normalize {
        x: Var,
        norms: Vec<T>,
        floored: Vec<bool>,
    },
    Cosine {
        u: Var,
        v: Var,
        eps: T,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Supcon {
        z: Var,
        sets: Vec<AnchorSet>,
        weights: Vec<Vec<T>>,
        tau: T,
    },
    Mean {
        x: Var,
    },
    Sum {
        x: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    param: Option<ParamId>,
    op: Op<T>,
}

/// Records one forward episode. Consumed by a single [`Tape::backward`].
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            param: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that does not participate in differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            param: None,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a model parameter; its gradient is reported by
    /// [`Tape::param_grads`].
    pub fn param(&mut self, id: ParamId, value: &Tensor<T>) -> Var {
        let v = self.leaf(value.clone(), true);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradients of every parameter leaf reached by the last backward pass.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.nodes
            .iter()
            .filter_map(|n| Some((n.param?, n.grad.as_ref()?)))
    }

    fn dims3(&self, v: Var, what: &str) -> Result<(usize, usize, usize)> {
        match self.shape(v) {
            &[a, b, c] => Ok((a, b, c)),
            s => Err(Error::Dimension(format!("{what} expects [batch, ch, len], got {s:?}"))),
        }
    }

    fn expect_shape(&self, v: Var, shape: &[usize], what: &str) -> Result<()> {
        if self.shape(v) != shape {
            return Err(Error::Dimension(format!(
                "{what}: expected shape {shape:?}, got {:?}",
                self.shape(v)
            )));
        }
        Ok(())
    }

    // ---- convolution -------------------------------------------------------

    /// Zero-padded strided cross-correlation.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let (batch, in_ch, len) = self.dims3(x, "conv1d input")?;
        let (out_ch, w_in, k) = self.dims3(w, "conv1d weight")?;
        if w_in != in_ch {
            return Err(Error::Dimension(format!(
                "conv1d: input has {in_ch} channels, weight expects {w_in}"
            )));
        }
        self.expect_shape(b, &[out_ch], "conv1d bias")?;
        if stride == 0 {
            return Err(Error::Config("conv1d stride must be positive".into()));
        }
        let out_len = conv::conv_out_len(len, k, stride, padding).ok_or_else(|| {
            Error::Config(format!(
                "conv1d: kernel {k} does not fit length {len} with padding {padding}"
            ))
        })?;
        let geom = ConvGeom {
            batch,
            in_ch,
            out_ch,
            k,
            stride,
            padding,
            in_len: len,
            out_len,
        };
        let y = conv::conv_forward(&geom, self.value(x).data(), self.value(w).data(), self.value(b).data());
        let value = Tensor::new(vec![batch, out_ch, out_len], y)?;
        Ok(self.push(
            value,
            Op::Conv1d {
                x,
                w,
                b,
                shape: ConvShape { stride, padding },
            },
            &[x, w, b],
        ))
    }

    pub fn transpose_conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        self.transpose_conv1d_padded(x, w, b, stride, padding, 0)
    }

    /// Transposed convolution with `output_padding` extra samples appended
    /// on the right, which selects among the input lengths that `conv1d`
    /// maps onto the same output length.
    pub fn transpose_conv1d_padded(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Var> {
        let (batch, in_ch, len) = self.dims3(x, "transpose_conv1d input")?;
        let (w_in, out_ch, k) = self.dims3(w, "transpose_conv1d weight")?;
        if w_in != in_ch {
            return Err(Error::Dimension(format!(
                "transpose_conv1d: input has {in_ch} channels, weight expects {w_in}"
            )));
        }
        self.expect_shape(b, &[out_ch], "transpose_conv1d bias")?;
        if stride == 0 || output_padding >= stride.max(1) && output_padding > 0 {
            return Err(Error::Config(format!(
                "transpose_conv1d: invalid stride {stride} / output padding {output_padding}"
            )));
        }
        let out_len = conv::tconv_out_len(len, k, stride, padding, output_padding)
            .ok_or_else(|| Error::Config("transpose_conv1d: output length < 1".into()))?;
        // The tconv is the adjoint of a conv mapping out_len -> len.
        let geom = ConvGeom {
            batch,
            in_ch: out_ch,
            out_ch: in_ch,
            k,
            stride,
            padding,
            in_len: out_len,
            out_len: len,
        };
        if conv::conv_out_len(out_len, k, stride, padding) != Some(len) {
            return Err(Error::Config("transpose_conv1d: inconsistent geometry".into()));
        }
        let mut y = conv::conv_adjoint(&geom, self.value(x).data(), self.value(w).data());
        let bias = self.value(b).data();
        for (i, row) in y.chunks_mut(out_len).enumerate() {
            let bo = bias[i % out_ch];
            row.iter_mut().for_each(|v| *v = *v + bo);
        }
        let value = Tensor::new(vec![batch, out_ch, out_len], y)?;
        Ok(self.push(
            value,
            Op::TConv1d {
                x,
                w,
                b,
                shape: ConvShape { stride, padding },
            },
            &[x, w, b],
        ))
    }

    // ---- normalization -----------------------------------------------------

    pub fn batch_norm1d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<T>,
        mode: BnMode,
        eps: T,
    ) -> Result<Var> {
        let (batch, ch, len) = self.dims3(x, "batch_norm1d input")?;
        self.expect_shape(gamma, &[ch], "batch_norm1d gamma")?;
        self.expect_shape(beta, &[ch], "batch_norm1d beta")?;
        if stats.mean.len() != ch || stats.var.len() != ch {
            return Err(Error::Dimension("batch_norm1d: running stats channel count".into()));
        }
        let n = batch * len;
        let batch_stats = mode != BnMode::Eval;
        if batch_stats && n < 2 {
            return Err(Error::Config("batch_norm1d in train mode needs batch*len >= 2".into()));
        }
        let xv = self.value(x).data();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let nt = T::from_usize(n).unwrap();
        let mut inv_std = vec![T::zero(); ch];
        let mut means = vec![T::zero(); ch];
        for c in 0..ch {
            let (mean, var) = if batch_stats {
                let mut s = T::zero();
                for b in 0..batch {
                    let o = (b * ch + c) * len;
                    s = s + xv[o..o + len].iter().copied().sum::<T>();
                }
                let mean = s / nt;
                let mut sq = T::zero();
                for b in 0..batch {
                    let o = (b * ch + c) * len;
                    sq = sq + xv[o..o + len].iter().map(|&v| (v - mean) * (v - mean)).sum::<T>();
                }
                let var = sq / nt;
                if mode == BnMode::Train {
                    let m = stats.momentum;
                    let unbiased = sq / T::from_usize(n - 1).unwrap();
                    stats.mean[c] = (T::one() - m) * stats.mean[c] + m * mean;
                    stats.var[c] = (T::one() - m) * stats.var[c] + m * unbiased;
                }
                (mean, var)
            } else {
                (stats.mean[c], stats.var[c])
            };
            means[c] = mean;
            inv_std[c] = T::one() / (var + eps).sqrt();
        }
        let mut xhat = vec![T::zero(); xv.len()];
        let mut y = vec![T::zero(); xv.len()];
        for b in 0..batch {
            for c in 0..ch {
                let o = (b * ch + c) * len;
                for i in o..o + len {
                    xhat[i] = (xv[i] - means[c]) * inv_std[c];
                    y[i] = g[c] * xhat[i] + bt[c];
                }
            }
        }
        let value = Tensor::new(vec![batch, ch, len], y)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            &[x, gamma, beta],
        ))
    }

    /// Per-sample, per-channel mean and standard deviation over the length
    /// axis. The deviation is `sqrt(var + eps^2)` so it never drops below `eps`.
    pub fn channel_stats(&mut self, x: Var, eps: T) -> Result<(Var, Var)> {
        let (batch, ch, len) = self.dims3(x, "channel_stats input")?;
        let xv = self.value(x).data();
        let lt = T::from_usize(len).unwrap();
        let mut mean = vec![T::zero(); batch * ch];
        let mut std = vec![T::zero(); batch * ch];
        for (r, row) in xv.chunks(len).enumerate() {
            let m = row.iter().copied().sum::<T>() / lt;
            let var = row.iter().map(|&v| (v - m) * (v - m)).sum::<T>() / lt;
            mean[r] = m;
            std[r] = (var + eps * eps).sqrt();
        }
        let mu = self.push(
            Tensor::new(vec![batch, ch], mean.clone())?,
            Op::ChannelMean { x },
            &[x],
        );
        let sigma = self.push(
            Tensor::new(vec![batch, ch], std)?,
            Op::ChannelStd { x, mean },
            &[x],
        );
        Ok((mu, sigma))
    }

    /// `(x - mu) / sigma` with `mu`, `sigma` of shape `[batch, ch]`.
    pub fn standardize(&mut self, x: Var, mu: Var, sigma: Var) -> Result<Var> {
        let (batch, ch, len) = self.dims3(x, "standardize input")?;
        self.expect_shape(mu, &[batch, ch], "standardize mean")?;
        self.expect_shape(sigma, &[batch, ch], "standardize std")?;
        let (m, s) = (self.value(mu).data(), self.value(sigma).data());
        let y: Vec<T> = self
            .value(x)
            .data()
            .chunks(len)
            .enumerate()
            .flat_map(|(r, row)| row.iter().map(move |&v| (v - m[r]) / s[r]))
            .collect();
        let value = Tensor::new(vec![batch, ch, len], y)?;
        Ok(self.push(value, Op::Standardize { x, mu, sigma }, &[x, mu, sigma]))
    }

    /// `x * scale + shift` with per-channel `scale`, `shift` of shape `[ch]`.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let (batch, ch, len) = self.dims3(x, "channel_affine input")?;
        self.expect_shape(scale, &[ch], "channel_affine scale")?;
        self.expect_shape(shift, &[ch], "channel_affine shift")?;
        let (s, t) = (self.value(scale).data(), self.value(shift).data());
        let y: Vec<T> = self
            .value(x)
            .data()
            .chunks(len)
            .enumerate()
            .flat_map(|(r, row)| {
                let c = r % ch;
                row.iter().map(move |&v| v * s[c] + t[c])
            })
            .collect();
        let value = Tensor::new(vec![batch, ch, len], y)?;
        Ok(self.push(value, Op::ChannelAffine { x, scale, shift }, &[x, scale, shift]))
    }

    // ---- elementwise -------------------------------------------------------

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let y: Vec<T> = v.data().iter().map(|&a| a.max(T::zero())).collect();
        let value = Tensor::new(v.shape().to_vec(), y).expect("shape preserved");
        self.push(value, Op::Relu { x }, &[x])
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let y: Vec<T> = v.data().iter().map(|&a| softplus(a)).collect();
        let value = Tensor::new(v.shape().to_vec(), y).expect("shape preserved");
        self.push(value, Op::Softplus { x }, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "add: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let y: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| p + q)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), y)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    /// Elementwise product of equally shaped arrays.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "mul: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let y: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| p * q)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), y)?;
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let v = self.value(x);
        let y: Vec<T> = v.data().iter().map(|&a| a * factor).collect();
        let value = Tensor::new(v.shape().to_vec(), y).expect("shape preserved");
        self.push(value, Op::Scale { x, factor }, &[x])
    }

    // ---- shape -------------------------------------------------------------

    /// Concatenates along the leading (batch) axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(Error::Dimension(format!("concat: {s:?} vs trailing {tail:?}")));
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
            },
            parts,
        ))
    }

    /// Rows `start..end` of the leading axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if start >= end || end > s[0] {
            return Err(Error::Dimension(format!("slice_rows {start}..{end} of {s:?}")));
        }
        let row: usize = s[1..].iter().product();
        let data = self.value(x).data()[start * row..end * row].to_vec();
        let mut shape = s.clone();
        shape[0] = end - start;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::SliceRows { x, start }, &[x]))
    }

    /// `[batch, ch, len] -> [batch, ch]` by averaging over length.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (batch, ch, len) = self.dims3(x, "global_avg_pool input")?;
        let lt = T::from_usize(len).unwrap();
        let y: Vec<T> = self
            .value(x)
            .data()
            .chunks(len)
            .map(|r| r.iter().copied().sum::<T>() / lt)
            .collect();
        let value = Tensor::new(vec![batch, ch], y)?;
        Ok(self.push(value, Op::GlobalAvgPool { x }, &[x]))
    }

    // ---- dense -------------------------------------------------------------

    /// `x W^T + b` for `x: [batch, d_in]`, `W: [d_out, d_in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (batch, d_in) = match self.shape(x) {
            &[a, b] => (a, b),
            s => return Err(Error::Dimension(format!("linear input must be 2-d, got {s:?}"))),
        };
        let (d_out, w_in) = match self.shape(w) {
            &[a, b] => (a, b),
            s => return Err(Error::Dimension(format!("linear weight must be 2-d, got {s:?}"))),
        };
        if w_in != d_in {
            return Err(Error::Dimension(format!(
                "linear: input width {d_in}, weight expects {w_in}"
            )));
        }
        self.expect_shape(b, &[d_out], "linear bias")?;
        let bias = self.value(b).data();
        let mut y: Vec<T> = (0..batch).flat_map(|_| bias.iter().copied()).collect();
        T::gemm(
            batch,
            d_in,
            d_out,
            T::one(),
            self.value(x).data(),
            d_in as isize,
            1,
            self.value(w).data(),
            1,
            d_in as isize,
            T::one(),
            &mut y,
            d_out as isize,
            1,
        );
        let value = Tensor::new(vec![batch, d_out], y)?;
        Ok(self.push(value, Op::Linear { x, w, b }, &[x, w, b]))
    }

    /// Row-wise L2 normalization with norms floored at `eps`.
    pub fn l2_normalize(&mut self, x: Var, eps: T) -> Result<Var> {
        let (rows, d) = match self.shape(x) {
            &[a, b] => (a, b),
            s => return Err(Error::Dimension(format!("l2_normalize expects 2-d, got {s:?}"))),
        };
        let mut norms = Vec::with_capacity(rows);
        let mut floored = Vec::with_capacity(rows);
        let mut y = Vec::with_capacity(rows * d);
        for row in self.value(x).data().chunks(d) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            floored.push(n < eps);
            let n = n.max(eps);
            norms.push(n);
            y.extend(row.iter().map(|&v| v / n));
        }
        let value = Tensor::new(vec![rows, d], y)?;
        Ok(self.push(value, Op::L2Normalize { x, norms, floored }, &[x]))
    }

    /// Cosine similarity of two vectors, norms floored at `eps`.
    pub fn cosine_similarity(&mut self, u: Var, v: Var, eps: T) -> Result<Var> {
        if self.shape(u) != self.shape(v) {
            return Err(Error::Dimension("cosine_similarity: shape mismatch".into()));
        }
        let (a, b) = (self.value(u).data(), self.value(v).data());
        let dot: T = a.iter().zip(b).map(|(&p, &q)| p * q).sum();
        let nu = a.iter().map(|&p| p * p).sum::<T>().sqrt().max(eps);
        let nv = b.iter().map(|&p| p * p).sum::<T>().sqrt().max(eps);
        let value = Tensor::scalar(dot / (nu * nv));
        Ok(self.push(value, Op::Cosine { u, v, eps }, &[u, v]))
    }

    // ---- losses ------------------------------------------------------------

    /// Mean softmax cross-entropy of `logits: [batch, C]` against `labels`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (batch, classes) = match self.shape(logits) {
            &[a, b] => (a, b),
            s => return Err(Error::Dimension(format!("logits must be 2-d, got {s:?}"))),
        };
        if batch == 0 || labels.is_empty() {
            return Err(Error::Config("cross-entropy over an empty batch".into()));
        }
        if labels.len() != batch {
            return Err(Error::Dimension(format!(
                "{} labels for {batch} logit rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Config(format!("label {bad} outside [0, {classes})")));
        }
        let mut probs = Vec::with_capacity(batch * classes);
        let mut total = T::zero();
        for (row, &label) in self.value(logits).data().chunks(classes).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            total = total + lse - row[label];
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        let value = Tensor::scalar(total / T::from_usize(batch).unwrap());
        Ok(self.push(
            value,
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Supervised-contrastive objective over rows of `z` using raw dot
    /// products as similarities (callers normalize first for cosine).
    ///
    /// Each anchor contributes
    /// `-(1/|P|) sum_p log(exp(s_ip/tau) / sum_{a in A} exp(s_ia/tau))`;
    /// the result is the mean over anchors, or zero when there are none.
    pub fn supcon(&mut self, z: Var, sets: Vec<AnchorSet>, tau: T) -> Result<Var> {
        let (n, d) = match self.shape(z) {
            &[a, b] => (a, b),
            s => return Err(Error::Dimension(format!("supcon expects [n, d], got {s:?}"))),
        };
        if tau <= T::zero() {
            return Err(Error::Config("temperature must be positive".into()));
        }
        let zv = self.value(z).data();
        let dot = |i: usize, j: usize| -> T {
            zv[i * d..(i + 1) * d]
                .iter()
                .zip(&zv[j * d..(j + 1) * d])
                .map(|(&a, &b)| a * b)
                .sum()
        };
        let mut total = T::zero();
        let mut weights = Vec::with_capacity(sets.len());
        for set in &sets {
            let idx_ok = |i: &usize| *i < n;
            if set.anchor >= n
                || !set.positives.iter().all(idx_ok)
                || !set.denominator.iter().all(idx_ok)
            {
                return Err(Error::Dimension("supcon index out of range".into()));
            }
            if set.denominator.is_empty() {
                return Err(Error::Usage(format!(
                    "anchor {} has an empty denominator set",
                    set.anchor
                )));
            }
            if set.positives.is_empty() {
                return Err(Error::Usage(format!("anchor {} has no positives", set.anchor)));
            }
            let logits: Vec<T> = set
                .denominator
                .iter()
                .map(|&a| dot(set.anchor, a) / tau)
                .collect();
            let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = logits.iter().map(|&l| (l - max).exp()).sum();
            let lse = max + sum.ln();
            let pos_mean = set
                .positives
                .iter()
                .map(|&p| dot(set.anchor, p) / tau)
                .sum::<T>()
                / T::from_usize(set.positives.len()).unwrap();
            total = total + lse - pos_mean;
            weights.push(logits.iter().map(|&l| (l - lse).exp()).collect());
        }
        let loss = if sets.is_empty() {
            T::zero()
        } else {
            total / T::from_usize(sets.len()).unwrap()
        };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Supcon {
                z,
                sets,
                weights,
                tau,
            },
            &[z],
        ))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.data().iter().copied().sum::<T>() / T::from_usize(v.numel()).unwrap();
        self.push(Tensor::scalar(m), Op::Mean { x }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    // ---- backward ----------------------------------------------------------

    /// Propagates d`loss`/d(node) to every node that requires a gradient.
    ///
    /// The tape can only be swept once; a second call returns
    /// [`Error::TapeConsumed`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.nodes.is_empty() {
            return Err(Error::Usage("backward on an empty tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        self.nodes[loss.0].grad = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.node_backward(i, g.data());
            self.nodes[i].grad = Some(g);
            for (parent, grad) in contributions {
                let node = &mut self.nodes[parent.0];
                match node.grad.as_mut() {
                    Some(acc) => acc.add_assign(&grad),
                    None => {
                        node.grad = Some(
                            Tensor::new(node.value.shape().to_vec(), grad)
                                .expect("gradient matches parent shape"),
                        )
                    }
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node_backward(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv1d { x, w, b, shape } => {
                let (batch, in_ch, len) = dims(self.shape(*x));
                let (out_ch, _, k) = dims(self.shape(*w));
                let geom = ConvGeom {
                    batch,
                    in_ch,
                    out_ch,
                    k,
                    stride: shape.stride,
                    padding: shape.padding,
                    in_len: len,
                    out_len: node.value.shape()[2],
                };
                if self.needs(*x) {
                    out.push((*x, conv::conv_adjoint(&geom, g, self.value(*w).data())));
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); out_ch * in_ch * k];
                    conv::conv_weight_grad(&geom, self.value(*x).data(), g, &mut dw);
                    out.push((*w, dw));
                }
                if self.needs(*b) {
                    out.push((*b, conv::channel_sums(g, batch, out_ch, geom.out_len)));
                }
            }
            Op::TConv1d { x, w, b, shape } => {
                let (batch, in_ch, len) = dims(self.shape(*x));
                let (_, out_ch, k) = dims(self.shape(*w));
                let out_len = node.value.shape()[2];
                // Forward was the adjoint of a conv from the output side.
                let geom = ConvGeom {
                    batch,
                    in_ch: out_ch,
                    out_ch: in_ch,
                    k,
                    stride: shape.stride,
                    padding: shape.padding,
                    in_len: out_len,
                    out_len: len,
                };
                if self.needs(*x) {
                    out.push((
                        *x,
                        conv::conv_forward(&geom, g, self.value(*w).data(), &vec![T::zero(); in_ch]),
                    ));
                }
                if self.needs(*w) {
                    // weight[in_ch, out_ch, k]: dW = x * im2col(g)^T.
                    let mut dw = vec![T::zero(); in_ch * out_ch * k];
                    conv::conv_weight_grad(&geom, g, self.value(*x).data(), &mut dw);
                    out.push((*w, dw));
                }
                if self.needs(*b) {
                    out.push((*b, conv::channel_sums(g, batch, out_ch, out_len)));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (batch, ch, len) = dims(self.shape(*x));
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); ch];
                let mut dbeta = vec![T::zero(); ch];
                for b in 0..batch {
                    for c in 0..ch {
                        let o = (b * ch + c) * len;
                        for j in o..o + len {
                            dbeta[c] = dbeta[c] + g[j];
                            dgamma[c] = dgamma[c] + g[j] * xhat[j];
                        }
                    }
                }
                if self.needs(*x) {
                    let nt = T::from_usize(batch * len).unwrap();
                    let mut dx = vec![T::zero(); g.len()];
                    for b in 0..batch {
                        for c in 0..ch {
                            let o = (b * ch + c) * len;
                            let coef = gam[c] * inv_std[c];
                            for j in o..o + len {
                                dx[j] = if *batch_stats {
                                    coef / nt * (nt * g[j] - dbeta[c] - xhat[j] * dgamma[c])
                                } else {
                                    coef * g[j]
                                };
                            }
                        }
                    }
                    out.push((*x, dx));
                }
                if self.needs(*gamma) {
                    out.push((*gamma, dgamma));
                }
                if self.needs(*beta) {
                    out.push((*beta, dbeta));
                }
            }
            Op::ChannelMean { x } => {
                let len = self.shape(*x)[2];
                let lt = T::from_usize(len).unwrap();
                let dx = g
                    .iter()
                    .flat_map(|&gr| std::iter::repeat_n(gr / lt, len))
                    .collect();
                out.push((*x, dx));
            }
            Op::ChannelStd { x, mean } => {
                let len = self.shape(*x)[2];
                let lt = T::from_usize(len).unwrap();
                let sd = node.value.data();
                let dx = self
                    .value(*x)
                    .data()
                    .chunks(len)
                    .enumerate()
                    .flat_map(|(r, row)| {
                        let coef = g[r] / (lt * sd[r]);
                        let m = mean[r];
                        row.iter().map(move |&v| coef * (v - m))
                    })
                    .collect();
                out.push((*x, dx));
            }
            Op::Standardize { x, mu, sigma } => {
                let len = self.shape(*x)[2];
                let (m, s) = (self.value(*mu).data(), self.value(*sigma).data());
                let xv = self.value(*x).data();
                if self.needs(*x) {
                    let dx = g
                        .chunks(len)
                        .enumerate()
                        .flat_map(|(r, row)| row.iter().map(move |&v| v / s[r]))
                        .collect();
                    out.push((*x, dx));
                }
                if self.needs(*mu) {
                    let dm = g
                        .chunks(len)
                        .enumerate()
                        .map(|(r, row)| -row.iter().copied().sum::<T>() / s[r])
                        .collect();
                    out.push((*mu, dm));
                }
                if self.needs(*sigma) {
                    let ds = g
                        .chunks(len)
                        .zip(xv.chunks(len))
                        .enumerate()
                        .map(|(r, (gr, xr))| {
                            -gr.iter()
                                .zip(xr)
                                .map(|(&a, &v)| a * (v - m[r]))
                                .sum::<T>()
                                / (s[r] * s[r])
                        })
                        .collect();
                    out.push((*sigma, ds));
                }
            }
            Op::ChannelAffine { x, scale, shift } => {
                let (_, ch, len) = dims(self.shape(*x));
                let s = self.value(*scale).data();
                if self.needs(*x) {
                    let dx = g
                        .chunks(len)
                        .enumerate()
                        .flat_map(|(r, row)| row.iter().map(move |&v| v * s[r % ch]))
                        .collect();
                    out.push((*x, dx));
                }
                if self.needs(*scale) {
                    let mut ds = vec![T::zero(); ch];
                    for (r, (gr, xr)) in g.chunks(len).zip(self.value(*x).data().chunks(len)).enumerate() {
                        ds[r % ch] = ds[r % ch] + gr.iter().zip(xr).map(|(&a, &b)| a * b).sum::<T>();
                    }
                    out.push((*scale, ds));
                }
                if self.needs(*shift) {
                    let mut dt = vec![T::zero(); ch];
                    for (r, gr) in g.chunks(len).enumerate() {
                        dt[r % ch] = dt[r % ch] + gr.iter().copied().sum::<T>();
                    }
                    out.push((*shift, dt));
                }
            }
            Op::Softplus { x } => {
                let dx = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&gr, &v)| gr * sigmoid(v))
                    .collect();
                out.push((*x, dx));
            }
            Op::Linear { x, w, b } => {
                let (batch, d_in) = (self.shape(*x)[0], self.shape(*x)[1]);
                let d_out = self.shape(*w)[0];
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); batch * d_in];
                    T::gemm(
                        batch,
                        d_out,
                        d_in,
                        T::one(),
                        g,
                        d_out as isize,
                        1,
                        self.value(*w).data(),
                        d_in as isize,
                        1,
                        T::zero(),
                        &mut dx,
                        d_in as isize,
                        1,
                    );
                    out.push((*x, dx));
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); d_out * d_in];
                    T::gemm(
                        d_out,
                        batch,
                        d_in,
                        T::one(),
                        g,
                        1,
                        d_out as isize,
                        self.value(*x).data(),
                        d_in as isize,
                        1,
                        T::zero(),
                        &mut dw,
                        d_in as isize,
                        1,
                    );
                    out.push((*w, dw));
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); d_out];
                    for row in g.chunks(d_out) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc = *acc + v;
                        }
                    }
                    out.push((*b, db));
                }
            }
            Op::Relu { x } => {
                let dx = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(&gr, &y)| if y > T::zero() { gr } else { T::zero() })
                    .collect();
                out.push((*x, dx));
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    out.push((*a, g.to_vec()));
                }
                if self.needs(*b) {
                    out.push((*b, g.to_vec()));
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let bv = self.value(*b).data();
                    out.push((*a, g.iter().zip(bv).map(|(&p, &q)| p * q).collect()));
                }
                if self.needs(*b) {
                    let av = self.value(*a).data();
                    out.push((*b, g.iter().zip(av).map(|(&p, &q)| p * q).collect()));
                }
            }
            Op::Scale { x, factor } => {
                out.push((*x, g.iter().map(|&v| v * *factor).collect()));
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if self.needs(p) {
                        out.push((p, g[offset..offset + n].to_vec()));
                    }
                    offset += n;
                }
            }
            Op::SliceRows { x, start } => {
                let s = self.shape(*x);
                let row: usize = s[1..].iter().product();
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                dx[start * row..start * row + g.len()].copy_from_slice(g);
                out.push((*x, dx));
            }
            Op::GlobalAvgPool { x } => {
                let len = self.shape(*x)[2];
                let lt = T::from_usize(len).unwrap();
                let dx = g
                    .iter()
                    .flat_map(|&v| std::iter::repeat_n(v / lt, len))
                    .collect();
                out.push((*x, dx));
            }
            Op::L2Normalize { x, norms, floored } => {
                let d = self.shape(*x)[1];
                let y = node.value.data();
                let mut dx = Vec::with_capacity(g.len());
                for (r, (gr, yr)) in g.chunks(d).zip(y.chunks(d)).enumerate() {
                    let n = norms[r];
                    if floored[r] {
                        dx.extend(gr.iter().map(|&v| v / n));
                    } else {
                        let proj: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        dx.extend(gr.iter().zip(yr).map(|(&a, &b)| (a - b * proj) / n));
                    }
                }
                out.push((*x, dx));
            }
            Op::Cosine { u, v, eps } => {
                let (a, b) = (self.value(*u).data(), self.value(*v).data());
                let c = node.value.data()[0];
                let eps = *eps;
                let na_raw = a.iter().map(|&p| p * p).sum::<T>().sqrt();
                let nb_raw = b.iter().map(|&p| p * p).sum::<T>().sqrt();
                let (na, nb) = (na_raw.max(eps), nb_raw.max(eps));
                let grad_of = |p: &[T], q: &[T], np: T, np_raw: T| -> Vec<T> {
                    p.iter()
                        .zip(q)
                        .map(|(&pi, &qi)| {
                            let mut d = qi / (na * nb);
                            if np_raw >= eps {
                                d = d - c * pi / (np * np);
                            }
                            g[0] * d
                        })
                        .collect()
                };
                if self.needs(*u) {
                    out.push((*u, grad_of(a, b, na, na_raw)));
                }
                if self.needs(*v) {
                    out.push((*v, grad_of(b, a, nb, nb_raw)));
                }
            }
            Op::SoftmaxCe {
                logits,
                labels,
                probs,
            } => {
                let classes = self.shape(*logits)[1];
                let bt = T::from_usize(labels.len()).unwrap();
                let mut dx = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    dx[r * classes + l] = dx[r * classes + l] - T::one();
                }
                dx.iter_mut().for_each(|v| *v = *v * g[0] / bt);
                out.push((*logits, dx));
            }
            Op::Supcon {
                z,
                sets,
                weights,
                tau,
            } => {
                let d = self.shape(*z)[1];
                let zv = self.value(*z).data();
                let mut dz = vec![T::zero(); zv.len()];
                if !sets.is_empty() {
                    let scale = g[0] / (T::from_usize(sets.len()).unwrap() * *tau);
                    for (set, w) in sets.iter().zip(weights) {
                        let inv_p = T::one() / T::from_usize(set.positives.len()).unwrap();
                        let i = set.anchor;
                        let mut pair = |j: usize, coef: T| {
                            for t in 0..d {
                                let zi = zv[i * d + t];
                                let zj = zv[j * d + t];
                                dz[i * d + t] = dz[i * d + t] + coef * zj;
                                dz[j * d + t] = dz[j * d + t] + coef * zi;
                            }
                        };
                        for (&a, &wa) in set.denominator.iter().zip(w) {
                            pair(a, scale * wa);
                        }
                        for &p in &set.positives {
                            pair(p, -scale * inv_p);
                        }
                    }
                }
                out.push((*z, dz));
            }
            Op::Mean { x } => {
                let n = self.value(*x).numel();
                let v = g[0] / T::from_usize(n).unwrap();
                out.push((*x, vec![v; n]));
            }
            Op::Sum { x } => {
                out.push((*x, vec![g[0]; self.value(*x).numel()]));
            }
        }
        out.retain(|(p, _)| self.needs(*p));
        out
    }
}

fn dims(s: &[usize]) -> (usize, usize, usize) {
    (s[0], s[1], s[2])
}

pub(crate) fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}
