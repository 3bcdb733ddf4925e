//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every differentiable op appends one entry holding its output tensor and a
//! backward rule referencing its inputs by [`Var`] handle. `backward` walks
//! the tape in reverse, applying each rule's chain-rule contribution. A tape
//! is built fresh per training step and dropped afterwards; it is never
//! reused across steps.

use super::kernels::{
    conv2d_backward_bias, conv2d_backward_input, conv2d_backward_weight, conv2d_forward,
    matmul_raw, Conv2dMeta,
};
use super::special::{gelu_scalar, gelu_scalar_grad};
use super::{for_each_lane, Tensor};
use crate::error::{Error, Result};
use rayon::prelude::*;

/// Handle to a tensor recorded on a [`GradTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

struct Entry {
    tensor: Tensor,
    rule: Rule,
}

enum Rule {
    Leaf,
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    AddRowBias {
        x: Var,
        b: Var,
    },
    AddChannelBias {
        x: Var,
        b: Var,
    },
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: Var,
        w: Var,
        bias: Option<Var>,
        t: usize,
        n_in: usize,
        n_out: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        meta: Conv2dMeta,
    },
    Gelu {
        x: Var,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    L2NormRows {
        x: Var,
        eps: f64,
        norms: Vec<f64>,
    },
    Transpose {
        x: Var,
        rows: usize,
        cols: usize,
    },
    NchwToTokens {
        x: Var,
        b: usize,
        c: usize,
        hw: usize,
    },
    TokensToNchw {
        x: Var,
        b: usize,
        c: usize,
        hw: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
        len: usize,
        cols: usize,
        total_rows: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
        len: usize,
        rows: usize,
        total_cols: usize,
    },
    SliceChannels {
        x: Var,
        start: usize,
        len: usize,
        b: usize,
        c: usize,
        hw: usize,
    },
    ConcatRows {
        xs: Vec<(Var, usize)>,
        cols: usize,
    },
    ConcatCols {
        xs: Vec<(Var, usize)>,
        rows: usize,
    },
    ConcatChannels {
        xs: Vec<(Var, usize)>,
        b: usize,
        hw: usize,
    },
    ScaleByParam {
        x: Var,
        s: Var,
        idx: usize,
    },
    GlobalAvgPool {
        x: Var,
        b: usize,
        c: usize,
        hw: usize,
    },
    MeanAll {
        x: Var,
    },
    DotConst {
        x: Var,
        weights: Vec<f64>,
    },
    CrossEntropyLs {
        logits: Var,
        targets: Vec<usize>,
        epsilon: f64,
        probs: Vec<f64>,
    },
    ArcMargin {
        cos: Var,
        targets: Vec<usize>,
        margin: f64,
    },
}

/// Recording tape for one forward/backward pass.
#[derive(Default)]
pub struct GradTape {
    entries: Vec<Entry>,
}

impl GradTape {
    pub fn new() -> Self {
        GradTape {
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Drop all recorded entries, returning the tape to its initial state.
    pub fn reset(&mut self) {
        self.entries.clear();
    }

    /// Record a tensor as a leaf, keeping its `requires_grad` flag.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.entries.push(Entry {
            tensor,
            rule: Rule::Leaf,
        });
        Var(self.entries.len() - 1)
    }

    /// Record a copy of `t` as a trainable leaf.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let mut c = t.clone();
        c.requires_grad = true;
        c.grad = None;
        self.leaf(c)
    }

    /// Record a copy of `t` as a non-trainable leaf.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        let mut c = t.clone();
        c.requires_grad = false;
        c.grad = None;
        self.leaf(c)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.entries[v.0].tensor
    }

    /// Gradient of a tensor after `backward`, if one was recorded.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.entries[v.0].tensor.grad.as_deref()
    }

    fn req(&self, v: Var) -> bool {
        self.entries[v.0].tensor.requires_grad
    }

    fn data(&self, v: Var) -> &[f64] {
        self.entries[v.0].tensor.data()
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.entries[v.0].tensor.shape()
    }

    fn push(&mut self, shape: &[usize], data: Vec<f64>, requires: bool, rule: Rule, op: &str) -> Result<Var> {
        let mut t = Tensor::from_vec(shape, data)?;
        t.check_finite(op)?;
        t.requires_grad = requires;
        self.entries.push(Entry { tensor: t, rule });
        Ok(Var(self.entries.len() - 1))
    }

    fn want_2d(&self, v: Var, op: &str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::Dimension(format!(
                "{} expects a 2-D tensor, got shape {:?}",
                op, s
            )));
        }
        Ok((s[0], s[1]))
    }

    fn want_4d(&self, v: Var, op: &str) -> Result<(usize, usize, usize, usize)> {
        let s = self.shape(v);
        if s.len() != 4 {
            return Err(Error::Dimension(format!(
                "{} expects a 4-D tensor, got shape {:?}",
                op, s
            )));
        }
        Ok((s[0], s[1], s[2], s[3]))
    }

    // ── Elementwise and broadcast ops ──

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "add shape mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let requires = self.req(a) || self.req(b);
        self.push(&shape, data, requires, Rule::Add { a, b }, "add")
    }

    /// Multiply every element by a constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let data: Vec<f64> = self.data(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let requires = self.req(x);
        self.push(&shape, data, requires, Rule::Scale { x, c }, "scale")
    }

    /// Add a length-N bias vector to every row of a [T, N] tensor.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (t, n) = self.want_2d(x, "add_row_bias")?;
        if self.shape(b) != [n] {
            return Err(Error::Dimension(format!(
                "add_row_bias: bias shape {:?} does not match row width {}",
                self.shape(b),
                n
            )));
        }
        let bias = self.data(b);
        let mut data = Vec::with_capacity(t * n);
        for row in self.data(x).chunks_exact(n) {
            for (v, bv) in row.iter().zip(bias) {
                data.push(v + bv);
            }
        }
        let requires = self.req(x) || self.req(b);
        self.push(&[t, n], data, requires, Rule::AddRowBias { x, b }, "add_row_bias")
    }

    /// Add a length-C bias vector across the channel axis of a [B, C, H, W] tensor.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (bt, c, h, w) = self.want_4d(x, "add_channel_bias")?;
        if self.shape(b) != [c] {
            return Err(Error::Dimension(format!(
                "add_channel_bias: bias shape {:?} does not match {} channels",
                self.shape(b),
                c
            )));
        }
        let bias = self.data(b);
        let hw = h * w;
        let mut data = Vec::with_capacity(bt * c * hw);
        for (plane_idx, plane) in self.data(x).chunks_exact(hw).enumerate() {
            let bv = bias[plane_idx % c];
            for v in plane {
                data.push(v + bv);
            }
        }
        let requires = self.req(x) || self.req(b);
        self.push(
            &[bt, c, h, w],
            data,
            requires,
            Rule::AddChannelBias { x, b },
            "add_channel_bias",
        )
    }

    // ── Linear algebra ──

    /// Matrix product of [m, k] and [k, n].
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.want_2d(a, "matmul")?;
        let (kb, n) = self.want_2d(b, "matmul")?;
        if ka != kb {
            return Err(Error::Dimension(format!(
                "matmul inner dims differ: [{}x{}] * [{}x{}]",
                m, ka, kb, n
            )));
        }
        let data = matmul_raw(self.data(a), self.data(b), m, ka, n);
        let requires = self.req(a) || self.req(b);
        self.push(
            &[m, n],
            data,
            requires,
            Rule::MatMul { a, b, m, k: ka, n },
            "matmul",
        )
    }

    /// Affine map of token rows: y = x * w^T + bias, with x [T, N] and w [M, N].
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (t, n_in) = self.want_2d(x, "linear")?;
        let (n_out, wn) = self.want_2d(w, "linear")?;
        if wn != n_in {
            return Err(Error::Dimension(format!(
                "linear: input width {} does not match weight shape [{}x{}]",
                n_in, n_out, wn
            )));
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [n_out] {
                return Err(Error::Dimension(format!(
                    "linear: bias shape {:?} does not match {} outputs",
                    self.shape(bv),
                    n_out
                )));
            }
        }
        let xd = self.data(x);
        let wd = self.data(w);
        let bd = bias.map(|bv| self.data(bv).to_vec());
        let mut data = vec![0.0; t * n_out];
        let row_job = |ti: usize, out_row: &mut [f64]| {
            let xrow = &xd[ti * n_in..(ti + 1) * n_in];
            for (o, out) in out_row.iter_mut().enumerate() {
                let wrow = &wd[o * n_in..(o + 1) * n_in];
                let mut acc = 0.0;
                for (xv, wv) in xrow.iter().zip(wrow) {
                    acc += xv * wv;
                }
                if let Some(ref bs) = bd {
                    acc += bs[o];
                }
                *out = acc;
            }
        };
        if t * n_in * n_out >= 100_000 && t > 1 {
            data.par_chunks_mut(n_out)
                .enumerate()
                .for_each(|(ti, row)| row_job(ti, row));
        } else {
            for (ti, row) in data.chunks_mut(n_out).enumerate() {
                row_job(ti, row);
            }
        }
        let requires = self.req(x) || self.req(w) || bias.map(|bv| self.req(bv)).unwrap_or(false);
        self.push(
            &[t, n_out],
            data,
            requires,
            Rule::Linear {
                x,
                w,
                bias,
                t,
                n_in,
                n_out,
            },
            "linear",
        )
    }

    /// 2-D convolution over [B, Cin, H, W] with weight [O, Cin/groups, k, k].
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let (b, cin, h, wdt) = self.want_4d(x, "conv2d")?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[2] != ws[3] {
            return Err(Error::Dimension(format!(
                "conv2d expects a square [O, Cin/g, k, k] weight, got {:?}",
                ws
            )));
        }
        let (out_ch, ci_pg, kernel) = (ws[0], ws[1], ws[2]);
        if groups == 0 || cin % groups != 0 || out_ch % groups != 0 {
            return Err(Error::Dimension(format!(
                "conv2d: groups {} must divide in channels {} and out channels {}",
                groups, cin, out_ch
            )));
        }
        if ci_pg != cin / groups {
            return Err(Error::Dimension(format!(
                "conv2d: weight expects {} input channels per group, input has {}",
                ci_pg,
                cin / groups
            )));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d: stride must be positive".into()));
        }
        if h + 2 * padding < kernel || wdt + 2 * padding < kernel {
            return Err(Error::Dimension(format!(
                "conv2d: kernel {} exceeds padded input {}x{}",
                kernel,
                h + 2 * padding,
                wdt + 2 * padding
            )));
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [out_ch] {
                return Err(Error::Dimension(format!(
                    "conv2d: bias shape {:?} does not match {} filters",
                    self.shape(bv),
                    out_ch
                )));
            }
        }
        let meta = Conv2dMeta {
            batch: b,
            in_ch: cin,
            out_ch,
            in_h: h,
            in_w: wdt,
            kernel,
            stride,
            padding,
            groups,
        };
        let bd = bias.map(|bv| self.data(bv).to_vec());
        let data = conv2d_forward(self.data(x), self.data(w), bd.as_deref(), &meta);
        let requires = self.req(x) || self.req(w) || bias.map(|bv| self.req(bv)).unwrap_or(false);
        self.push(
            &[b, out_ch, meta.out_h(), meta.out_w()],
            data,
            requires,
            Rule::Conv2d { x, w, bias, meta },
            "conv2d",
        )
    }

    // ── Activations and normalization ──

    /// Gaussian error linear unit, elementwise.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data: Vec<f64> = self.data(x).iter().map(|&v| gelu_scalar(v)).collect();
        let shape = self.shape(x).to_vec();
        let requires = self.req(x);
        self.push(&shape, data, requires, Rule::Gelu { x }, "gelu")
    }

    /// Softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!(
                "softmax axis {} out of range for shape {:?}",
                axis, shape
            )));
        }
        let xd = self.data(x);
        let mut data = vec![0.0; xd.len()];
        let axis_len = shape[axis];
        for_each_lane(&shape, axis, |base, stride| {
            let mut mx = f64::NEG_INFINITY;
            for i in 0..axis_len {
                mx = mx.max(xd[base + i * stride]);
            }
            let mut sum = 0.0;
            for i in 0..axis_len {
                let e = (xd[base + i * stride] - mx).exp();
                data[base + i * stride] = e;
                sum += e;
            }
            for i in 0..axis_len {
                data[base + i * stride] /= sum;
            }
        });
        let requires = self.req(x);
        self.push(&shape, data, requires, Rule::Softmax { x, axis }, "softmax")
    }

    /// Layer normalization along `axis` with affine parameters gamma and
    /// beta of length `shape[axis]`. Uses population variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, axis: usize, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!(
                "layer_norm axis {} out of range for shape {:?}",
                axis, shape
            )));
        }
        let axis_len = shape[axis];
        if self.shape(gamma) != [axis_len] || self.shape(beta) != [axis_len] {
            return Err(Error::Dimension(format!(
                "layer_norm: gamma {:?} / beta {:?} must both have shape [{}]",
                self.shape(gamma),
                self.shape(beta),
                axis_len
            )));
        }
        let xd = self.data(x);
        let gd = self.data(gamma).to_vec();
        let bd = self.data(beta).to_vec();
        let mut data = vec![0.0; xd.len()];
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = Vec::with_capacity(xd.len() / axis_len);
        for_each_lane(&shape, axis, |base, stride| {
            let mut mean = 0.0;
            for i in 0..axis_len {
                mean += xd[base + i * stride];
            }
            mean /= axis_len as f64;
            let mut var = 0.0;
            for i in 0..axis_len {
                let d = xd[base + i * stride] - mean;
                var += d * d;
            }
            var /= axis_len as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for i in 0..axis_len {
                let idx = base + i * stride;
                let xh = (xd[idx] - mean) * inv;
                xhat[idx] = xh;
                data[idx] = gd[i] * xh + bd[i];
            }
        });
        let requires = self.req(x) || self.req(gamma) || self.req(beta);
        self.push(
            &shape,
            data,
            requires,
            Rule::LayerNorm {
                x,
                gamma,
                beta,
                axis,
                xhat,
                inv_std,
            },
            "layer_norm",
        )
    }

    /// Normalize each row of a [R, C] tensor to unit L2 length, with an eps
    /// guard in the denominator.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.want_2d(x, "l2_normalize_rows")?;
        let xd = self.data(x);
        let mut norms = Vec::with_capacity(r);
        let mut data = Vec::with_capacity(r * c);
        for row in xd.chunks_exact(c) {
            let mut sq = 0.0;
            for v in row {
                sq += v * v;
            }
            let n = sq.sqrt();
            norms.push(n);
            let s = 1.0 / (n + eps);
            for v in row {
                data.push(v * s);
            }
        }
        let requires = self.req(x);
        self.push(
            &[r, c],
            data,
            requires,
            Rule::L2NormRows { x, eps, norms },
            "l2_normalize_rows",
        )
    }

    // ── Shape movement ──

    /// Transpose a 2-D tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.want_2d(x, "transpose")?;
        let xd = self.data(x);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = xd[i * c + j];
            }
        }
        let requires = self.req(x);
        self.push(
            &[c, r],
            data,
            requires,
            Rule::Transpose { x, rows: r, cols: c },
            "transpose",
        )
    }

    /// Flatten [B, C, H, W] to token rows [B*H*W, C].
    pub fn nchw_to_tokens(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.want_4d(x, "nchw_to_tokens")?;
        let hw = h * w;
        let xd = self.data(x);
        let mut data = vec![0.0; b * hw * c];
        for bi in 0..b {
            for ci in 0..c {
                let plane = (bi * c + ci) * hw;
                for p in 0..hw {
                    data[(bi * hw + p) * c + ci] = xd[plane + p];
                }
            }
        }
        let requires = self.req(x);
        self.push(
            &[b * hw, c],
            data,
            requires,
            Rule::NchwToTokens { x, b, c, hw },
            "nchw_to_tokens",
        )
    }

    /// Inverse of [`GradTape::nchw_to_tokens`].
    pub fn tokens_to_nchw(&mut self, x: Var, b: usize, c: usize, h: usize, w: usize) -> Result<Var> {
        let (t, tc) = self.want_2d(x, "tokens_to_nchw")?;
        let hw = h * w;
        if t != b * hw || tc != c {
            return Err(Error::Dimension(format!(
                "tokens_to_nchw: token shape [{}x{}] does not match [{},{},{},{}]",
                t, tc, b, c, h, w
            )));
        }
        let xd = self.data(x);
        let mut data = vec![0.0; b * c * hw];
        for bi in 0..b {
            for ci in 0..c {
                let plane = (bi * c + ci) * hw;
                for p in 0..hw {
                    data[plane + p] = xd[(bi * hw + p) * c + ci];
                }
            }
        }
        let requires = self.req(x);
        self.push(
            &[b, c, h, w],
            data,
            requires,
            Rule::TokensToNchw { x, b, c, hw },
            "tokens_to_nchw",
        )
    }

    /// Contiguous row slice of a 2-D tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.want_2d(x, "slice_rows")?;
        if start + len > r {
            return Err(Error::Dimension(format!(
                "slice_rows: range {}..{} exceeds {} rows",
                start,
                start + len,
                r
            )));
        }
        let data = self.data(x)[start * c..(start + len) * c].to_vec();
        let requires = self.req(x);
        self.push(
            &[len, c],
            data,
            requires,
            Rule::SliceRows {
                x,
                start,
                len,
                cols: c,
                total_rows: r,
            },
            "slice_rows",
        )
    }

    /// Contiguous column slice of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.want_2d(x, "slice_cols")?;
        if start + len > c {
            return Err(Error::Dimension(format!(
                "slice_cols: range {}..{} exceeds {} columns",
                start,
                start + len,
                c
            )));
        }
        let xd = self.data(x);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&xd[i * c + start..i * c + start + len]);
        }
        let requires = self.req(x);
        self.push(
            &[r, len],
            data,
            requires,
            Rule::SliceCols {
                x,
                start,
                len,
                rows: r,
                total_cols: c,
            },
            "slice_cols",
        )
    }

    /// Contiguous channel slice of a [B, C, H, W] tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (b, c, h, w) = self.want_4d(x, "slice_channels")?;
        if start + len > c {
            return Err(Error::Dimension(format!(
                "slice_channels: range {}..{} exceeds {} channels",
                start,
                start + len,
                c
            )));
        }
        let hw = h * w;
        let xd = self.data(x);
        let mut data = Vec::with_capacity(b * len * hw);
        for bi in 0..b {
            let base = (bi * c + start) * hw;
            data.extend_from_slice(&xd[base..base + len * hw]);
        }
        let requires = self.req(x);
        self.push(
            &[b, len, h, w],
            data,
            requires,
            Rule::SliceChannels {
                x,
                start,
                len,
                b,
                c,
                hw,
            },
            "slice_channels",
        )
    }

    /// Stack 2-D tensors with equal column counts on top of each other.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Contract("concat_rows: empty input list".into()));
        }
        let (_, c) = self.want_2d(xs[0], "concat_rows")?;
        let mut parts = Vec::with_capacity(xs.len());
        let mut total = 0;
        for &v in xs {
            let (r, vc) = self.want_2d(v, "concat_rows")?;
            if vc != c {
                return Err(Error::Dimension(format!(
                    "concat_rows: column counts differ ({} vs {})",
                    c, vc
                )));
            }
            parts.push((v, r));
            total += r;
        }
        let mut data = Vec::with_capacity(total * c);
        for &(v, _) in &parts {
            data.extend_from_slice(self.data(v));
        }
        let requires = xs.iter().any(|&v| self.req(v));
        self.push(
            &[total, c],
            data,
            requires,
            Rule::ConcatRows { xs: parts, cols: c },
            "concat_rows",
        )
    }

    /// Stack 2-D tensors with equal row counts side by side.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Contract("concat_cols: empty input list".into()));
        }
        let (r, _) = self.want_2d(xs[0], "concat_cols")?;
        let mut parts = Vec::with_capacity(xs.len());
        let mut total = 0;
        for &v in xs {
            let (vr, vc) = self.want_2d(v, "concat_cols")?;
            if vr != r {
                return Err(Error::Dimension(format!(
                    "concat_cols: row counts differ ({} vs {})",
                    r, vr
                )));
            }
            parts.push((v, vc));
            total += vc;
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &(v, vc) in &parts {
                data.extend_from_slice(&self.data(v)[i * vc..(i + 1) * vc]);
            }
        }
        let requires = xs.iter().any(|&v| self.req(v));
        self.push(
            &[r, total],
            data,
            requires,
            Rule::ConcatCols { xs: parts, rows: r },
            "concat_cols",
        )
    }

    /// Stack [B, Ci, H, W] tensors along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Contract("concat_channels: empty input list".into()));
        }
        let (b, _, h, w) = self.want_4d(xs[0], "concat_channels")?;
        let hw = h * w;
        let mut parts = Vec::with_capacity(xs.len());
        let mut total = 0;
        for &v in xs {
            let (vb, vc, vh, vw) = self.want_4d(v, "concat_channels")?;
            if vb != b || vh != h || vw != w {
                return Err(Error::Dimension(format!(
                    "concat_channels: batch/spatial dims differ ({:?} vs {:?})",
                    self.shape(xs[0]),
                    self.shape(v)
                )));
            }
            parts.push((v, vc));
            total += vc;
        }
        let mut data = Vec::with_capacity(b * total * hw);
        for bi in 0..b {
            for &(v, vc) in &parts {
                let vd = self.data(v);
                data.extend_from_slice(&vd[bi * vc * hw..(bi + 1) * vc * hw]);
            }
        }
        let requires = xs.iter().any(|&v| self.req(v));
        self.push(
            &[b, total, h, w],
            data,
            requires,
            Rule::ConcatChannels { xs: parts, b, hw },
            "concat_channels",
        )
    }

    // ── Reductions and scalar plumbing ──

    /// Multiply a tensor by one element of a 1-D parameter vector.
    pub fn scale_by_param(&mut self, x: Var, s: Var, idx: usize) -> Result<Var> {
        let ss = self.shape(s);
        if ss.len() != 1 || idx >= ss[0] {
            return Err(Error::Dimension(format!(
                "scale_by_param: index {} invalid for parameter shape {:?}",
                idx, ss
            )));
        }
        let sv = self.data(s)[idx];
        let data: Vec<f64> = self.data(x).iter().map(|v| v * sv).collect();
        let shape = self.shape(x).to_vec();
        let requires = self.req(x) || self.req(s);
        self.push(
            &shape,
            data,
            requires,
            Rule::ScaleByParam { x, s, idx },
            "scale_by_param",
        )
    }

    /// Mean over the spatial extent of each channel: [B, C, H, W] -> [B, C].
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.want_4d(x, "global_avg_pool")?;
        let hw = h * w;
        let xd = self.data(x);
        let mut data = Vec::with_capacity(b * c);
        for plane in xd.chunks_exact(hw) {
            let mut sum = 0.0;
            for v in plane {
                sum += v;
            }
            data.push(sum / hw as f64);
        }
        let requires = self.req(x);
        self.push(
            &[b, c],
            data,
            requires,
            Rule::GlobalAvgPool { x, b, c, hw },
            "global_avg_pool",
        )
    }

    /// Mean of all elements, as a scalar.
    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let xd = self.data(x);
        let mut sum = 0.0;
        for v in xd {
            sum += v;
        }
        let data = vec![sum / xd.len() as f64];
        let requires = self.req(x);
        self.push(&[1], data, requires, Rule::MeanAll { x }, "mean_all")
    }

    /// Weighted sum against a fixed coefficient vector, as a scalar.
    pub fn dot_const(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let xd = self.data(x);
        if xd.len() != weights.len() {
            return Err(Error::Dimension(format!(
                "dot_const: {} elements vs {} weights",
                xd.len(),
                weights.len()
            )));
        }
        let mut sum = 0.0;
        for (v, w) in xd.iter().zip(weights) {
            sum += v * w;
        }
        let requires = self.req(x);
        self.push(
            &[1],
            vec![sum],
            requires,
            Rule::DotConst {
                x,
                weights: weights.to_vec(),
            },
            "dot_const",
        )
    }

    // ── Loss heads ──

    /// Cross-entropy with label smoothing over [B, K] logits, averaged over
    /// the batch. The smoothed target distribution is
    /// (1 - epsilon) * one_hot + epsilon / K.
    pub fn cross_entropy_label_smoothing(
        &mut self,
        logits: Var,
        targets: &[usize],
        epsilon: f64,
    ) -> Result<Var> {
        let (b, k) = self.want_2d(logits, "cross_entropy_label_smoothing")?;
        if targets.len() != b {
            return Err(Error::Contract(format!(
                "cross_entropy_label_smoothing: {} targets for batch of {}",
                targets.len(),
                b
            )));
        }
        if k < 2 {
            return Err(Error::Contract(
                "cross_entropy_label_smoothing: need at least 2 classes".into(),
            ));
        }
        if !(0.0..1.0).contains(&epsilon) {
            return Err(Error::Config(format!(
                "cross_entropy_label_smoothing: epsilon {} outside [0, 1)",
                epsilon
            )));
        }
        for (i, &t) in targets.iter().enumerate() {
            if t >= k {
                return Err(Error::Contract(format!(
                    "cross_entropy_label_smoothing: target {} out of range for {} classes (row {})",
                    t, k, i
                )));
            }
        }
        let zd = self.data(logits);
        let uniform = epsilon / k as f64;
        let mut probs = vec![0.0; b * k];
        let mut loss = 0.0;
        for (bi, row) in zd.chunks_exact(k).enumerate() {
            let mut mx = f64::NEG_INFINITY;
            for &v in row {
                mx = mx.max(v);
            }
            let mut sum = 0.0;
            for &v in row {
                sum += (v - mx).exp();
            }
            let lse = mx + sum.ln();
            let mut row_loss = lse;
            for (j, &z) in row.iter().enumerate() {
                probs[bi * k + j] = (z - lse).exp();
                let mut q = uniform;
                if j == targets[bi] {
                    q += 1.0 - epsilon;
                }
                row_loss -= q * z;
            }
            loss += row_loss;
        }
        loss /= b as f64;
        let requires = self.req(logits);
        self.push(
            &[1],
            vec![loss],
            requires,
            Rule::CrossEntropyLs {
                logits,
                targets: targets.to_vec(),
                epsilon,
                probs,
            },
            "cross_entropy_label_smoothing",
        )
    }

    /// Additive angular margin on target cosines: each row's target entry
    /// cos(theta) becomes cos(theta + margin); other entries pass through.
    pub fn arc_margin(&mut self, cos: Var, targets: &[usize], margin: f64) -> Result<Var> {
        let (b, k) = self.want_2d(cos, "arc_margin")?;
        if targets.len() != b {
            return Err(Error::Contract(format!(
                "arc_margin: {} targets for batch of {}",
                targets.len(),
                b
            )));
        }
        if !(0.0..std::f64::consts::PI).contains(&margin) {
            return Err(Error::Config(format!(
                "arc_margin: margin {} outside [0, pi)",
                margin
            )));
        }
        for &t in targets {
            if t >= k {
                return Err(Error::Contract(format!(
                    "arc_margin: target {} out of range for {} columns",
                    t, k
                )));
            }
        }
        let (cm, sm) = (margin.cos(), margin.sin());
        let mut data = self.data(cos).to_vec();
        for (bi, &t) in targets.iter().enumerate() {
            let c = data[bi * k + t];
            // cos(theta + m) = cos(theta) cos(m) - sin(theta) sin(m)
            let st = (1.0 - c * c).max(0.0).sqrt();
            data[bi * k + t] = c * cm - st * sm;
        }
        let requires = self.req(cos);
        self.push(
            &[b, k],
            data,
            requires,
            Rule::ArcMargin {
                cos,
                targets: targets.to_vec(),
                margin,
            },
            "arc_margin",
        )
    }

    // ── Backward pass ──

    /// Reverse-walk the tape from a scalar loss, accumulating gradients into
    /// the `grad` field of every participating tensor with `requires_grad`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = &self.entries[loss.0].tensor;
        if !lt.is_scalar() {
            return Err(Error::Contract(format!(
                "backward expects a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        if !lt.requires_grad {
            return Err(Error::Contract(
                "backward: loss does not depend on any tracked parameter".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.entries.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            let t = &mut self.entries[id].tensor;
            if t.requires_grad {
                t.grad = Some(g);
            }
        }
        Ok(())
    }

    fn accum(&self, grads: &mut [Option<Vec<f64>>], v: Var, contribution: Vec<f64>) {
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(&contribution) {
                    *e += c;
                }
            }
            slot => *slot = Some(contribution),
        }
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.entries[id].rule {
            Rule::Leaf => {}
            Rule::Add { a, b } => {
                if self.req(*a) {
                    self.accum(grads, *a, g.to_vec());
                }
                if self.req(*b) {
                    self.accum(grads, *b, g.to_vec());
                }
            }
            Rule::Scale { x, c } => {
                if self.req(*x) {
                    self.accum(grads, *x, g.iter().map(|v| v * c).collect());
                }
            }
            Rule::AddRowBias { x, b } => {
                if self.req(*x) {
                    self.accum(grads, *x, g.to_vec());
                }
                if self.req(*b) {
                    let n = self.shape(*b)[0];
                    let mut db = vec![0.0; n];
                    for row in g.chunks_exact(n) {
                        for (d, gv) in db.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                    self.accum(grads, *b, db);
                }
            }
            Rule::AddChannelBias { x, b } => {
                if self.req(*x) {
                    self.accum(grads, *x, g.to_vec());
                }
                if self.req(*b) {
                    let c = self.shape(*b)[0];
                    let s = self.shape(*x);
                    let hw = s[2] * s[3];
                    let mut db = vec![0.0; c];
                    for (plane_idx, plane) in g.chunks_exact(hw).enumerate() {
                        let mut sum = 0.0;
                        for v in plane {
                            sum += v;
                        }
                        db[plane_idx % c] += sum;
                    }
                    self.accum(grads, *b, db);
                }
            }
            Rule::MatMul { a, b, m, k, n } => {
                if self.req(*a) {
                    // dA = dY * B^T
                    let bd = self.data(*b);
                    let mut bt = vec![0.0; k * n];
                    for i in 0..*k {
                        for j in 0..*n {
                            bt[j * k + i] = bd[i * n + j];
                        }
                    }
                    self.accum(grads, *a, matmul_raw(g, &bt, *m, *n, *k));
                }
                if self.req(*b) {
                    // dB = A^T * dY
                    let ad = self.data(*a);
                    let mut at = vec![0.0; m * k];
                    for i in 0..*m {
                        for j in 0..*k {
                            at[j * m + i] = ad[i * k + j];
                        }
                    }
                    self.accum(grads, *b, matmul_raw(&at, g, *k, *m, *n));
                }
            }
            Rule::Linear {
                x,
                w,
                bias,
                t,
                n_in,
                n_out,
            } => {
                if self.req(*x) {
                    // dX = dY * W
                    self.accum(grads, *x, matmul_raw(g, self.data(*w), *t, *n_out, *n_in));
                }
                if self.req(*w) {
                    // dW = dY^T * X
                    let mut gt = vec![0.0; t * n_out];
                    for i in 0..*t {
                        for j in 0..*n_out {
                            gt[j * t + i] = g[i * n_out + j];
                        }
                    }
                    self.accum(grads, *w, matmul_raw(&gt, self.data(*x), *n_out, *t, *n_in));
                }
                if let Some(bv) = bias {
                    if self.req(*bv) {
                        let mut db = vec![0.0; *n_out];
                        for row in g.chunks_exact(*n_out) {
                            for (d, gv) in db.iter_mut().zip(row) {
                                *d += gv;
                            }
                        }
                        self.accum(grads, *bv, db);
                    }
                }
            }
            Rule::Conv2d { x, w, bias, meta } => {
                if self.req(*x) {
                    self.accum(grads, *x, conv2d_backward_input(g, self.data(*w), meta));
                }
                if self.req(*w) {
                    self.accum(grads, *w, conv2d_backward_weight(g, self.data(*x), meta));
                }
                if let Some(bv) = bias {
                    if self.req(*bv) {
                        self.accum(grads, *bv, conv2d_backward_bias(g, meta));
                    }
                }
            }
            Rule::Gelu { x } => {
                if self.req(*x) {
                    let xd = self.data(*x);
                    self.accum(
                        grads,
                        *x,
                        g.iter()
                            .zip(xd)
                            .map(|(gv, &xv)| gv * gelu_scalar_grad(xv))
                            .collect(),
                    );
                }
            }
            Rule::Softmax { x, axis } => {
                if self.req(*x) {
                    let y = self.entries[id].tensor.data();
                    let shape = self.entries[id].tensor.shape().to_vec();
                    let axis_len = shape[*axis];
                    let mut dx = vec![0.0; y.len()];
                    for_each_lane(&shape, *axis, |base, stride| {
                        let mut dot = 0.0;
                        for i in 0..axis_len {
                            let idx = base + i * stride;
                            dot += g[idx] * y[idx];
                        }
                        for i in 0..axis_len {
                            let idx = base + i * stride;
                            dx[idx] = y[idx] * (g[idx] - dot);
                        }
                    });
                    self.accum(grads, *x, dx);
                }
            }
            Rule::LayerNorm {
                x,
                gamma,
                beta,
                axis,
                xhat,
                inv_std,
            } => {
                let shape = self.shape(*x).to_vec();
                let axis_len = shape[*axis];
                let gd = self.data(*gamma);
                if self.req(*x) {
                    let mut dx = vec![0.0; xhat.len()];
                    let mut lane = 0usize;
                    for_each_lane(&shape, *axis, |base, stride| {
                        let inv = inv_std[lane];
                        lane += 1;
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for i in 0..axis_len {
                            let idx = base + i * stride;
                            let dxh = g[idx] * gd[i];
                            m1 += dxh;
                            m2 += dxh * xhat[idx];
                        }
                        m1 /= axis_len as f64;
                        m2 /= axis_len as f64;
                        for i in 0..axis_len {
                            let idx = base + i * stride;
                            let dxh = g[idx] * gd[i];
                            dx[idx] = inv * (dxh - m1 - xhat[idx] * m2);
                        }
                    });
                    self.accum(grads, *x, dx);
                }
                if self.req(*gamma) {
                    let mut dg = vec![0.0; axis_len];
                    for_each_lane(&shape, *axis, |base, stride| {
                        for (i, d) in dg.iter_mut().enumerate() {
                            let idx = base + i * stride;
                            *d += g[idx] * xhat[idx];
                        }
                    });
                    self.accum(grads, *gamma, dg);
                }
                if self.req(*beta) {
                    let mut db = vec![0.0; axis_len];
                    for_each_lane(&shape, *axis, |base, stride| {
                        for (i, d) in db.iter_mut().enumerate() {
                            *d += g[base + i * stride];
                        }
                    });
                    self.accum(grads, *beta, db);
                }
            }
            Rule::L2NormRows { x, eps, norms } => {
                if self.req(*x) {
                    let xd = self.data(*x);
                    let c = self.shape(*x)[1];
                    let mut dx = vec![0.0; xd.len()];
                    for (r, n) in norms.iter().enumerate() {
                        let s = 1.0 / (n + eps);
                        let row = &xd[r * c..(r + 1) * c];
                        let grow = &g[r * c..(r + 1) * c];
                        let mut xg = 0.0;
                        for (xv, gv) in row.iter().zip(grow) {
                            xg += xv * gv;
                        }
                        let coef = if *n > 0.0 {
                            xg / (n * (n + eps) * (n + eps))
                        } else {
                            0.0
                        };
                        for i in 0..c {
                            dx[r * c + i] = s * grow[i] - coef * row[i];
                        }
                    }
                    self.accum(grads, *x, dx);
                }
            }
            Rule::Transpose { x, rows, cols } => {
                if self.req(*x) {
                    // g has shape [cols, rows]; undo the transpose.
                    let mut dx = vec![0.0; rows * cols];
                    for i in 0..*cols {
                        for j in 0..*rows {
                            dx[j * cols + i] = g[i * rows + j];
                        }
                    }
                    self.accum(grads, *x, dx);
                }
            }
            Rule::NchwToTokens { x, b, c, hw } => {
                if self.req(*x) {
                    let mut dx = vec![0.0; b * c * hw];
                    for bi in 0..*b {
                        for ci in 0..*c {
                            let plane = (bi * c + ci) * hw;
                            for p in 0..*hw {
                                dx[plane + p] = g[(bi * hw + p) * c + ci];
                            }
                        }
                    }
                    self.accum(grads, *x, dx);
                }
            }
            Rule::TokensToNchw { x, b, c, hw } => {
                if self.req(*x) {
                    let mut dx = vec![0.0; b * hw * c];
                    for bi in 0..*b {
                        for ci in 0..*c {
                            let plane = (bi * c + ci) * hw;
                            for p in 0..*hw {
                                dx[(bi * hw + p) * c + ci] = g[plane + p];
                            }
                        }
                    }
                    self.accum(grads, *x, dx);
                }
            }
            Rule::SliceRows {
                x,
                start,
                len,
                cols,
                total_rows,
            } => {
                if self.req(*x) {
                    let mut dx = vec![0.0; total_rows * cols];
                    dx[start * cols..(start + len) * cols].copy_from_slice(g);
                    self.accum(grads, *x, dx);
                }
            }
            Rule::SliceCols {
                x,
                start,
                len,
                rows,
                total_cols,
            } => {
                if self.req(*x) {
                    let mut dx = vec![0.0; rows * total_cols];
                    for i in 0..*rows {
                        dx[i * total_cols + start..i * total_cols + start + len]
                            .copy_from_slice(&g[i * len..(i + 1) * len]);
                    }
                    self.accum(grads, *x, dx);
                }
            }
            Rule::SliceChannels {
                x,
                start,
                len,
                b,
                c,
                hw,
            } => {
                if self.req(*x) {
                    let mut dx = vec![0.0; b * c * hw];
                    for bi in 0..*b {
                        let dst = (bi * c + start) * hw;
                        let src = bi * len * hw;
                        dx[dst..dst + len * hw].copy_from_slice(&g[src..src + len * hw]);
                    }
                    self.accum(grads, *x, dx);
                }
            }
            Rule::ConcatRows { xs, cols } => {
                let mut offset = 0;
                for &(v, r) in xs {
                    if self.req(v) {
                        self.accum(grads, v, g[offset * cols..(offset + r) * cols].to_vec());
                    }
                    offset += r;
                }
            }
            Rule::ConcatCols { xs, rows } => {
                let total: usize = xs.iter().map(|&(_, w)| w).sum();
                let mut offset = 0;
                for &(v, w) in xs {
                    if self.req(v) {
                        let mut dv = Vec::with_capacity(rows * w);
                        for i in 0..*rows {
                            dv.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        self.accum(grads, v, dv);
                    }
                    offset += w;
                }
            }
            Rule::ConcatChannels { xs, b, hw } => {
                let total: usize = xs.iter().map(|&(_, c)| c).sum();
                let mut offset = 0;
                for &(v, c) in xs {
                    if self.req(v) {
                        let mut dv = Vec::with_capacity(b * c * hw);
                        for bi in 0..*b {
                            let base = (bi * total + offset) * hw;
                            dv.extend_from_slice(&g[base..base + c * hw]);
                        }
                        self.accum(grads, v, dv);
                    }
                    offset += c;
                }
            }
            Rule::ScaleByParam { x, s, idx } => {
                let sv = self.data(*s)[*idx];
                if self.req(*x) {
                    self.accum(grads, *x, g.iter().map(|v| v * sv).collect());
                }
                if self.req(*s) {
                    let xd = self.data(*x);
                    let mut ds = vec![0.0; self.shape(*s)[0]];
                    let mut sum = 0.0;
                    for (gv, xv) in g.iter().zip(xd) {
                        sum += gv * xv;
                    }
                    ds[*idx] = sum;
                    self.accum(grads, *s, ds);
                }
            }
            Rule::GlobalAvgPool { x, b, c, hw } => {
                if self.req(*x) {
                    let inv = 1.0 / *hw as f64;
                    let mut dx = Vec::with_capacity(b * c * hw);
                    for &gv in g.iter().take(b * c) {
                        for _ in 0..*hw {
                            dx.push(gv * inv);
                        }
                    }
                    self.accum(grads, *x, dx);
                }
            }
            Rule::MeanAll { x } => {
                if self.req(*x) {
                    let n = self.data(*x).len();
                    let gv = g[0] / n as f64;
                    self.accum(grads, *x, vec![gv; n]);
                }
            }
            Rule::DotConst { x, weights } => {
                if self.req(*x) {
                    self.accum(grads, *x, weights.iter().map(|w| w * g[0]).collect());
                }
            }
            Rule::CrossEntropyLs {
                logits,
                targets,
                epsilon,
                probs,
            } => {
                if self.req(*logits) {
                    let b = targets.len();
                    let k = probs.len() / b;
                    let uniform = epsilon / k as f64;
                    let scale = g[0] / b as f64;
                    let mut dz = vec![0.0; probs.len()];
                    for (bi, &t) in targets.iter().enumerate() {
                        for j in 0..k {
                            let mut q = uniform;
                            if j == t {
                                q += 1.0 - epsilon;
                            }
                            dz[bi * k + j] = scale * (probs[bi * k + j] - q);
                        }
                    }
                    self.accum(grads, *logits, dz);
                }
            }
            Rule::ArcMargin {
                cos,
                targets,
                margin,
            } => {
                if self.req(*cos) {
                    let k = self.shape(*cos)[1];
                    let cd = self.data(*cos);
                    let (cm, sm) = (margin.cos(), margin.sin());
                    let mut dx = g.to_vec();
                    for (bi, &t) in targets.iter().enumerate() {
                        let c = cd[bi * k + t];
                        // d/dc [c*cos(m) - sqrt(1-c^2)*sin(m)]
                        //   = cos(m) + c*sin(m)/sqrt(1-c^2),
                        // with the root floored to keep the slope finite as
                        // |cos| approaches 1.
                        let st = (1.0 - c * c).max(2e-7).sqrt();
                        dx[bi * k + t] *= cm + c * sm / st;
                    }
                    self.accum(grads, *cos, dx);
                }
            }
        }
    }
}
