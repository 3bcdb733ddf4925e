//! Building blocks of the backbone: convolution and normalization layers,
//! the full/low-rank projection wrapper, cross-covariance channel attention,
//! and the two encoder block types.
//!
//! Every layer owns its weight tensors and records them on the tape through
//! a [`ParamReg`], so one forward implementation serves both training
//! (trainable leaves) and inference (constant leaves).

use crate::error::{Error, Result};
use crate::loralin::{xavier_fill, LinearLayer, LoRaLinLayer};
use crate::tensor::{GradTape, Tensor, Var};
use rand_chacha::ChaCha20Rng;

/// Epsilon added to q/k row norms inside channel attention.
pub const ATTENTION_NORM_EPS: f64 = 1e-6;

/// Records named parameters on a tape during a forward pass.
///
/// In trainable mode every registered tensor becomes a gradient-carrying
/// leaf; in frozen mode it becomes a constant. The `(name, var)` pairs are
/// kept in registration order so an optimizer can read gradients by name
/// after `backward`.
#[derive(Debug)]
pub struct ParamReg {
    trainable: bool,
    vars: Vec<(String, Var)>,
}

impl ParamReg {
    pub fn for_training() -> Self {
        ParamReg {
            trainable: true,
            vars: Vec::new(),
        }
    }

    pub fn frozen() -> Self {
        ParamReg {
            trainable: false,
            vars: Vec::new(),
        }
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn register(&mut self, tape: &mut GradTape, name: String, t: &Tensor) -> Var {
        let var = if self.trainable {
            tape.param(t)
        } else {
            tape.constant(t)
        };
        self.vars.push((name, var));
        var
    }

    pub fn vars(&self) -> &[(String, Var)] {
        &self.vars
    }

    pub fn lookup(&self, name: &str) -> Option<Var> {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
    }
}

/// 2-D convolution layer with weight [out, in/groups, k, k] and bias [out].
#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv2dLayer {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        if groups == 0 || in_ch % groups != 0 || out_ch % groups != 0 {
            return Err(Error::Config(format!(
                "conv layer: groups {} must divide in channels {} and out channels {}",
                groups, in_ch, out_ch
            )));
        }
        if kernel == 0 || stride == 0 {
            return Err(Error::Config(
                "conv layer: kernel and stride must be positive".into(),
            ));
        }
        Ok(Conv2dLayer {
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
            groups,
            weight: Tensor::zeros(&[out_ch, in_ch / groups, kernel, kernel]),
            bias: Tensor::zeros(&[out_ch]),
        })
    }

    pub fn init_with(&mut self, rng: &mut ChaCha20Rng) {
        let field = self.kernel * self.kernel;
        xavier_fill(
            &mut self.weight,
            (self.in_ch / self.groups) * field,
            (self.out_ch / self.groups) * field,
            rng,
        );
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }

    pub fn forward_with(
        &self,
        tape: &mut GradTape,
        x: Var,
        reg: &mut ParamReg,
        name: &str,
    ) -> Result<Var> {
        let w = reg.register(tape, format!("{}.weight", name), &self.weight);
        let b = reg.register(tape, format!("{}.bias", name), &self.bias);
        tape.conv2d(x, w, Some(b), self.stride, self.padding, self.groups)
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(format!("{}.weight", prefix), &self.weight);
        f(format!("{}.bias", prefix), &self.bias);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{}.weight", prefix), &mut self.weight);
        f(format!("{}.bias", prefix), &mut self.bias);
    }
}

/// Layer normalization over the channel axis of token rows, with learnable
/// gain and shift.
#[derive(Debug, Clone)]
pub struct NormLayer {
    pub features: usize,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl NormLayer {
    pub fn new(features: usize) -> Self {
        NormLayer {
            features,
            gamma: Tensor::filled(&[features], 1.0),
            beta: Tensor::zeros(&[features]),
            eps: 1e-6,
        }
    }

    pub fn parameter_count(&self) -> usize {
        2 * self.features
    }

    /// Normalize token rows [T, C] along the channel axis.
    pub fn forward_with(
        &self,
        tape: &mut GradTape,
        tokens: Var,
        reg: &mut ParamReg,
        name: &str,
    ) -> Result<Var> {
        let g = reg.register(tape, format!("{}.gamma", name), &self.gamma);
        let b = reg.register(tape, format!("{}.beta", name), &self.beta);
        tape.layer_norm(tokens, g, b, 1, self.eps)
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(format!("{}.gamma", prefix), &self.gamma);
        f(format!("{}.beta", prefix), &self.beta);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{}.gamma", prefix), &mut self.gamma);
        f(format!("{}.beta", prefix), &mut self.beta);
    }
}

/// A projection that is either a full-rank linear layer or its low-rank
/// factored replacement, chosen at construction.
#[derive(Debug, Clone)]
pub enum ProjLayer {
    Full(LinearLayer),
    Low(LoRaLinLayer),
}

impl ProjLayer {
    pub fn full(in_features: usize, out_features: usize) -> Result<Self> {
        Ok(ProjLayer::Full(LinearLayer::new(
            in_features,
            out_features,
            true,
        )?))
    }

    pub fn low(in_features: usize, out_features: usize, gamma: f64) -> Result<Self> {
        Ok(ProjLayer::Low(LoRaLinLayer::new(
            in_features,
            out_features,
            gamma,
        )?))
    }

    /// Full-rank unless a ratio is given.
    pub fn choose(in_features: usize, out_features: usize, gamma: Option<f64>) -> Result<Self> {
        match gamma {
            None => ProjLayer::full(in_features, out_features),
            Some(g) => ProjLayer::low(in_features, out_features, g),
        }
    }

    pub fn in_features(&self) -> usize {
        match self {
            ProjLayer::Full(l) => l.in_features,
            ProjLayer::Low(l) => l.in_features,
        }
    }

    pub fn out_features(&self) -> usize {
        match self {
            ProjLayer::Full(l) => l.out_features,
            ProjLayer::Low(l) => l.out_features,
        }
    }

    pub fn init_with(&mut self, rng: &mut ChaCha20Rng) {
        match self {
            ProjLayer::Full(l) => l.init_with(rng),
            ProjLayer::Low(l) => l.init_with(rng),
        }
    }

    pub fn parameter_count(&self) -> usize {
        match self {
            ProjLayer::Full(l) => l.parameter_count(),
            ProjLayer::Low(l) => l.parameter_count(),
        }
    }

    pub fn forward_with(
        &self,
        tape: &mut GradTape,
        x: Var,
        reg: &mut ParamReg,
        name: &str,
    ) -> Result<Var> {
        match self {
            ProjLayer::Full(l) => {
                let w = reg.register(tape, format!("{}.weight", name), &l.weight);
                let b = l
                    .bias
                    .as_ref()
                    .map(|t| reg.register(tape, format!("{}.bias", name), t));
                l.forward_with(tape, x, w, b)
            }
            ProjLayer::Low(l) => {
                let wd = reg.register(tape, format!("{}.w_down", name), &l.w_down);
                let wu = reg.register(tape, format!("{}.w_up", name), &l.w_up);
                let b = reg.register(tape, format!("{}.bias", name), &l.bias);
                l.forward_tokens_with(tape, x, wd, wu, b)
            }
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        match self {
            ProjLayer::Full(l) => {
                f(format!("{}.weight", prefix), &l.weight);
                if let Some(b) = &l.bias {
                    f(format!("{}.bias", prefix), b);
                }
            }
            ProjLayer::Low(l) => {
                f(format!("{}.w_down", prefix), &l.w_down);
                f(format!("{}.w_up", prefix), &l.w_up);
                f(format!("{}.bias", prefix), &l.bias);
            }
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        match self {
            ProjLayer::Full(l) => {
                f(format!("{}.weight", prefix), &mut l.weight);
                if let Some(b) = &mut l.bias {
                    f(format!("{}.bias", prefix), b);
                }
            }
            ProjLayer::Low(l) => {
                f(format!("{}.w_down", prefix), &mut l.w_down);
                f(format!("{}.w_up", prefix), &mut l.w_up);
                f(format!("{}.bias", prefix), &mut l.bias);
            }
        }
    }
}

/// Cosine-similarity map between the rows of two channel matrices.
///
/// Both inputs are [C, N] (channels as rows). Rows are L2-normalized and the
/// result is the [C, C] matrix of pairwise dot products. With `a == b` the
/// result is exactly symmetric, since entry (i, j) and entry (j, i) sum the
/// same products in the same order.
pub fn cosine_scores(tape: &mut GradTape, a: Var, b: Var) -> Result<Var> {
    let an = tape.l2_normalize_rows(a, ATTENTION_NORM_EPS)?;
    let bn = tape.l2_normalize_rows(b, ATTENTION_NORM_EPS)?;
    let bt = tape.transpose(bn)?;
    tape.matmul(an, bt)
}

/// Cross-covariance channel attention over fused q/k/v token rows.
///
/// `qkv` is [B*N, 3C] with rows grouped by batch element; the three feature
/// blocks are q, k, v in that order. Within each batch element and head the
/// channel slices are transposed to [dh, N], q and k rows are normalized,
/// and attention operates on the [dh, dh] channel map: softmax over the
/// temperature-scaled cosine scores, applied to v. Heads are concatenated
/// back to [N, C] and batch elements to [B*N, C].
pub fn channel_attention(
    tape: &mut GradTape,
    qkv: Var,
    batch: usize,
    heads: usize,
    temperature: Var,
) -> Result<Var> {
    let shape = tape.value(qkv).shape().to_vec();
    if shape.len() != 2 || shape[1] % 3 != 0 {
        return Err(Error::Dimension(format!(
            "channel attention: expected [T, 3C] fused tokens, got {:?}",
            shape
        )));
    }
    let channels = shape[1] / 3;
    if batch == 0 || shape[0] == 0 || shape[0] % batch != 0 {
        return Err(Error::Dimension(format!(
            "channel attention: {} token rows do not split into {} batch elements",
            shape[0], batch
        )));
    }
    if heads == 0 || channels % heads != 0 {
        return Err(Error::Dimension(format!(
            "channel attention: {} heads must divide {} channels",
            heads, channels
        )));
    }
    if tape.value(temperature).shape() != [heads] {
        return Err(Error::Dimension(format!(
            "channel attention: temperature shape {:?} does not match {} heads",
            tape.value(temperature).shape(),
            heads
        )));
    }
    let n = shape[0] / batch;
    let dh = channels / heads;
    let mut batch_outs = Vec::with_capacity(batch);
    for bi in 0..batch {
        let rows = tape.slice_rows(qkv, bi * n, n)?;
        let mut head_outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let q = tape.slice_cols(rows, h * dh, dh)?;
            let k = tape.slice_cols(rows, channels + h * dh, dh)?;
            let v = tape.slice_cols(rows, 2 * channels + h * dh, dh)?;
            let qt = tape.transpose(q)?;
            let kt = tape.transpose(k)?;
            let vt = tape.transpose(v)?;
            let scores = cosine_scores(tape, qt, kt)?;
            let scaled = tape.scale_by_param(scores, temperature, h)?;
            let attn = tape.softmax(scaled, 1)?;
            let out_t = tape.matmul(attn, vt)?;
            head_outs.push(tape.transpose(out_t)?);
        }
        batch_outs.push(tape.concat_cols(&head_outs)?);
    }
    tape.concat_rows(&batch_outs)
}

fn dims4(tape: &GradTape, x: Var, what: &str) -> Result<(usize, usize, usize, usize)> {
    let s = tape.value(x).shape();
    if s.len() != 4 {
        return Err(Error::Dimension(format!(
            "{}: expected a 4-D input, got {:?}",
            what, s
        )));
    }
    Ok((s[0], s[1], s[2], s[3]))
}

/// Convolutional encoder block: depthwise convolution, then a token-domain
/// layer norm and pointwise MLP, with a residual from the block input.
#[derive(Debug, Clone)]
pub struct ConvEncoder {
    pub dim: usize,
    pub dwconv: Conv2dLayer,
    pub norm: NormLayer,
    pub pw1: ProjLayer,
    pub pw2: ProjLayer,
}

impl ConvEncoder {
    pub fn new(dim: usize, kernel: usize, mlp_gamma: Option<f64>) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "conv encoder: kernel {} must be odd",
                kernel
            )));
        }
        Ok(ConvEncoder {
            dim,
            dwconv: Conv2dLayer::new(dim, dim, kernel, 1, (kernel - 1) / 2, dim)?,
            norm: NormLayer::new(dim),
            pw1: ProjLayer::choose(dim, 4 * dim, mlp_gamma)?,
            pw2: ProjLayer::choose(4 * dim, dim, mlp_gamma)?,
        })
    }

    pub fn init_with(&mut self, rng: &mut ChaCha20Rng) {
        self.dwconv.init_with(rng);
        self.pw1.init_with(rng);
        self.pw2.init_with(rng);
    }

    pub fn parameter_count(&self) -> usize {
        self.dwconv.parameter_count()
            + self.norm.parameter_count()
            + self.pw1.parameter_count()
            + self.pw2.parameter_count()
    }

    pub fn forward_with(
        &self,
        tape: &mut GradTape,
        x: Var,
        reg: &mut ParamReg,
        prefix: &str,
    ) -> Result<Var> {
        let (b, c, h, w) = dims4(tape, x, "conv encoder")?;
        let y = self
            .dwconv
            .forward_with(tape, x, reg, &format!("{}.dwconv", prefix))?;
        let tok = tape.nchw_to_tokens(y)?;
        let tok = self
            .norm
            .forward_with(tape, tok, reg, &format!("{}.norm", prefix))?;
        let tok = self
            .pw1
            .forward_with(tape, tok, reg, &format!("{}.pw1", prefix))?;
        let tok = tape.gelu(tok)?;
        let tok = self
            .pw2
            .forward_with(tape, tok, reg, &format!("{}.pw2", prefix))?;
        let y = tape.tokens_to_nchw(tok, b, c, h, w)?;
        tape.add(x, y)
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.dwconv.visit(&format!("{}.dwconv", prefix), f);
        self.norm.visit(&format!("{}.norm", prefix), f);
        self.pw1.visit(&format!("{}.pw1", prefix), f);
        self.pw2.visit(&format!("{}.pw2", prefix), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.dwconv.visit_mut(&format!("{}.dwconv", prefix), f);
        self.norm.visit_mut(&format!("{}.norm", prefix), f);
        self.pw1.visit_mut(&format!("{}.pw1", prefix), f);
        self.pw2.visit_mut(&format!("{}.pw2", prefix), f);
    }
}

/// Split-depthwise transpose attention block.
///
/// The channels are split into equal chunks; each chunk but the last passes
/// through a 3x3 depthwise mixer that also receives the previous mixer's
/// output, widening the receptive field chunk by chunk. The re-assembled
/// map then runs channel attention with an inner residual, followed by a
/// pointwise MLP, and finally a residual from the block input.
#[derive(Debug, Clone)]
pub struct SdtaEncoder {
    pub dim: usize,
    pub splits: usize,
    pub heads: usize,
    pub mixers: Vec<Conv2dLayer>,
    pub norm_xca: NormLayer,
    pub qkv: ProjLayer,
    pub temperature: Tensor,
    pub proj: ProjLayer,
    pub norm_mlp: NormLayer,
    pub pw1: ProjLayer,
    pub pw2: ProjLayer,
}

/// Projection ratios for one attention block: q/k/v fusion, output
/// projection, and the two MLP layers. `None` keeps a layer full-rank.
#[derive(Debug, Clone, Copy, Default)]
pub struct SdtaRanks {
    pub qkv_gamma: Option<f64>,
    pub proj_gamma: Option<f64>,
    pub mlp_gamma: Option<f64>,
}

impl SdtaEncoder {
    pub fn new(dim: usize, splits: usize, heads: usize, ranks: SdtaRanks) -> Result<Self> {
        if splits < 2 || dim % splits != 0 {
            return Err(Error::Config(format!(
                "attention encoder: {} splits must be at least 2 and divide {} channels",
                splits, dim
            )));
        }
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "attention encoder: {} heads must divide {} channels",
                heads, dim
            )));
        }
        let width = dim / splits;
        let mixers = (1..splits)
            .map(|_| Conv2dLayer::new(width, width, 3, 1, 1, width))
            .collect::<Result<Vec<_>>>()?;
        Ok(SdtaEncoder {
            dim,
            splits,
            heads,
            mixers,
            norm_xca: NormLayer::new(dim),
            qkv: ProjLayer::choose(dim, 3 * dim, ranks.qkv_gamma)?,
            temperature: Tensor::filled(&[heads], 1.0),
            proj: ProjLayer::choose(dim, dim, ranks.proj_gamma)?,
            norm_mlp: NormLayer::new(dim),
            pw1: ProjLayer::choose(dim, 4 * dim, ranks.mlp_gamma)?,
            pw2: ProjLayer::choose(4 * dim, dim, ranks.mlp_gamma)?,
        })
    }

    pub fn init_with(&mut self, rng: &mut ChaCha20Rng) {
        for m in &mut self.mixers {
            m.init_with(rng);
        }
        self.qkv.init_with(rng);
        self.proj.init_with(rng);
        self.pw1.init_with(rng);
        self.pw2.init_with(rng);
    }

    pub fn parameter_count(&self) -> usize {
        self.mixers
            .iter()
            .map(Conv2dLayer::parameter_count)
            .sum::<usize>()
            + self.norm_xca.parameter_count()
            + self.qkv.parameter_count()
            + self.temperature.numel()
            + self.proj.parameter_count()
            + self.norm_mlp.parameter_count()
            + self.pw1.parameter_count()
            + self.pw2.parameter_count()
    }

    pub fn forward_with(
        &self,
        tape: &mut GradTape,
        x: Var,
        reg: &mut ParamReg,
        prefix: &str,
    ) -> Result<Var> {
        let (b, c, h, w) = dims4(tape, x, "attention encoder")?;
        if c != self.dim {
            return Err(Error::Dimension(format!(
                "attention encoder: input has {} channels, layer expects {}",
                c, self.dim
            )));
        }
        let width = c / self.splits;
        let mut pieces = Vec::with_capacity(self.splits);
        let mut carry: Option<Var> = None;
        for m in 0..self.splits - 1 {
            let chunk = tape.slice_channels(x, m * width, width)?;
            let fed = match carry {
                None => chunk,
                Some(prev) => tape.add(prev, chunk)?,
            };
            let mixed = self.mixers[m].forward_with(
                tape,
                fed,
                reg,
                &format!("{}.mix{}", prefix, m + 1),
            )?;
            pieces.push(mixed);
            carry = Some(mixed);
        }
        pieces.push(tape.slice_channels(x, (self.splits - 1) * width, width)?);
        let fused = tape.concat_channels(&pieces)?;

        let base = tape.nchw_to_tokens(fused)?;
        let normed = self
            .norm_xca
            .forward_with(tape, base, reg, &format!("{}.norm_xca", prefix))?;
        let qkv = self
            .qkv
            .forward_with(tape, normed, reg, &format!("{}.qkv", prefix))?;
        let temp = reg.register(
            tape,
            format!("{}.attention.temperature", prefix),
            &self.temperature,
        );
        let attn = channel_attention(tape, qkv, b, self.heads, temp)?;
        let attn = self
            .proj
            .forward_with(tape, attn, reg, &format!("{}.proj", prefix))?;
        let tok = tape.add(base, attn)?;

        let normed = self
            .norm_mlp
            .forward_with(tape, tok, reg, &format!("{}.norm_mlp", prefix))?;
        let tok = self
            .pw1
            .forward_with(tape, normed, reg, &format!("{}.pw1", prefix))?;
        let tok = tape.gelu(tok)?;
        let tok = self
            .pw2
            .forward_with(tape, tok, reg, &format!("{}.pw2", prefix))?;
        let y = tape.tokens_to_nchw(tok, b, c, h, w)?;
        tape.add(x, y)
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (m, mixer) in self.mixers.iter().enumerate() {
            mixer.visit(&format!("{}.mix{}", prefix, m + 1), f);
        }
        self.norm_xca.visit(&format!("{}.norm_xca", prefix), f);
        self.qkv.visit(&format!("{}.qkv", prefix), f);
        f(format!("{}.attention.temperature", prefix), &self.temperature);
        self.proj.visit(&format!("{}.proj", prefix), f);
        self.norm_mlp.visit(&format!("{}.norm_mlp", prefix), f);
        self.pw1.visit(&format!("{}.pw1", prefix), f);
        self.pw2.visit(&format!("{}.pw2", prefix), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (m, mixer) in self.mixers.iter_mut().enumerate() {
            mixer.visit_mut(&format!("{}.mix{}", prefix, m + 1), f);
        }
        self.norm_xca.visit_mut(&format!("{}.norm_xca", prefix), f);
        self.qkv.visit_mut(&format!("{}.qkv", prefix), f);
        f(
            format!("{}.attention.temperature", prefix),
            &mut self.temperature,
        );
        self.proj.visit_mut(&format!("{}.proj", prefix), f);
        self.norm_mlp.visit_mut(&format!("{}.norm_mlp", prefix), f);
        self.pw1.visit_mut(&format!("{}.pw1", prefix), f);
        self.pw2.visit_mut(&format!("{}.pw2", prefix), f);
    }
}
