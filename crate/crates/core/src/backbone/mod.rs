//! The embedding backbone: a four-stage hybrid of convolutional encoder
//! blocks and split-depthwise channel-attention blocks, with configurable
//! low-rank replacement of the projection layers, followed by a pooled
//! embedding head.

pub mod layers;

use crate::complexity::{GraphNode, LayerGraph, NodeKind};
use crate::error::{Error, Result};
use crate::loralin::LinearLayer;
use crate::tensor::{read_blob, write_blob, GradTape, Tensor, Var};
use layers::{Conv2dLayer, ConvEncoder, NormLayer, ParamReg, ProjLayer, SdtaEncoder, SdtaRanks};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

/// Architecture hyperparameters. The default is the deployment profile:
/// a 1.99 M parameter network for 128x128 RGB inputs with attention in the
/// final stage and selective low-rank projections there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Blocks per stage; in attention stages the last block is the
    /// attention block.
    pub stage_depths: [usize; 4],
    /// Channel width per stage.
    pub stage_dims: [usize; 4],
    /// Depthwise kernel size of the convolutional encoders, per stage.
    pub conv_kernel_sizes: [usize; 4],
    /// 1-indexed stages that end in an attention block.
    pub sdta_stages: Vec<usize>,
    /// Channel chunks in the split-depthwise mixer.
    pub sdta_splits: usize,
    /// Attention heads.
    pub num_heads: usize,
    /// Rank ratio of the q/k/v fusion when `selective` is set.
    pub qkv_gamma: f64,
    /// Rank ratio of the attention-block MLP when `selective` is set.
    pub mlp_gamma: f64,
    /// Replace only the attention-block q/k/v and MLP projections with
    /// low-rank layers; otherwise `global_gamma` applies everywhere.
    pub selective: bool,
    /// Rank ratio applied to every projection when `selective` is off.
    pub global_gamma: Option<f64>,
    /// Output embedding width.
    pub embedding_dim: usize,
    /// Input resolution (square, multiple of 32).
    pub input_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            stage_depths: [3, 3, 9, 3],
            stage_dims: [32, 64, 100, 184],
            conv_kernel_sizes: [3, 5, 7, 9],
            sdta_stages: vec![4],
            sdta_splits: 4,
            num_heads: 8,
            qkv_gamma: 0.5,
            mlp_gamma: 0.6,
            selective: true,
            global_gamma: None,
            embedding_dim: 512,
            input_size: 128,
        }
    }
}

fn check_ratio(name: &str, g: f64) -> Result<()> {
    if !(g > 0.0 && g <= 1.0) || !g.is_finite() {
        return Err(Error::Config(format!(
            "{} must be in (0, 1], got {}",
            name, g
        )));
    }
    Ok(())
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (i, &d) in self.stage_depths.iter().enumerate() {
            if d == 0 {
                return Err(Error::Config(format!(
                    "stage_depths[{}] must be positive",
                    i
                )));
            }
        }
        for (i, &c) in self.stage_dims.iter().enumerate() {
            if c == 0 {
                return Err(Error::Config(format!("stage_dims[{}] must be positive", i)));
            }
        }
        for (i, &k) in self.conv_kernel_sizes.iter().enumerate() {
            if k % 2 == 0 || k == 0 {
                return Err(Error::Config(format!(
                    "conv_kernel_sizes[{}] must be odd, got {}",
                    i, k
                )));
            }
        }
        let mut seen = [false; 4];
        for &s in &self.sdta_stages {
            if s == 0 || s > 4 {
                return Err(Error::Config(format!(
                    "sdta_stages entries must be in 1..=4, got {}",
                    s
                )));
            }
            if seen[s - 1] {
                return Err(Error::Config(format!("sdta_stages repeats stage {}", s)));
            }
            seen[s - 1] = true;
            let c = self.stage_dims[s - 1];
            if self.sdta_splits < 2 || c % self.sdta_splits != 0 {
                return Err(Error::Config(format!(
                    "sdta_splits {} must be at least 2 and divide stage {} width {}",
                    self.sdta_splits, s, c
                )));
            }
            if self.num_heads == 0 || c % self.num_heads != 0 {
                return Err(Error::Config(format!(
                    "num_heads {} must divide stage {} width {}",
                    self.num_heads, s, c
                )));
            }
        }
        if self.selective {
            check_ratio("qkv_gamma", self.qkv_gamma)?;
            check_ratio("mlp_gamma", self.mlp_gamma)?;
            if self.global_gamma.is_some() {
                return Err(Error::Config(
                    "global_gamma must be unset when selective is on".into(),
                ));
            }
        } else {
            match self.global_gamma {
                None => {
                    return Err(Error::Config(
                        "global_gamma is required when selective is off".into(),
                    ))
                }
                Some(g) => check_ratio("global_gamma", g)?,
            }
        }
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be positive".into()));
        }
        if self.input_size < 32 || self.input_size % 32 != 0 {
            return Err(Error::Config(format!(
                "input_size must be a multiple of 32, at least 32, got {}",
                self.input_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Block {
    Conv(ConvEncoder),
    Sdta(SdtaEncoder),
}

#[derive(Debug, Clone)]
struct Stage {
    downsample: Option<(NormLayer, Conv2dLayer)>,
    blocks: Vec<Block>,
}

/// The full embedding network. Construction zero-fills the weights; call
/// [`EdgeEarModel::init`] or [`EdgeEarModel::load_weights`] before use.
#[derive(Debug, Clone)]
pub struct EdgeEarModel {
    pub config: ModelConfig,
    stem_conv: Conv2dLayer,
    stem_norm: NormLayer,
    stages: Vec<Stage>,
    head_norm: NormLayer,
    head_linear: ProjLayer,
}

impl EdgeEarModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let conv_mlp_gamma = if config.selective {
            None
        } else {
            config.global_gamma
        };
        let sdta_ranks = if config.selective {
            SdtaRanks {
                qkv_gamma: Some(config.qkv_gamma),
                proj_gamma: None,
                mlp_gamma: Some(config.mlp_gamma),
            }
        } else {
            SdtaRanks {
                qkv_gamma: config.global_gamma,
                proj_gamma: config.global_gamma,
                mlp_gamma: config.global_gamma,
            }
        };

        let mut stages = Vec::with_capacity(4);
        for i in 0..4 {
            let c = config.stage_dims[i];
            let downsample = if i == 0 {
                None
            } else {
                let prev = config.stage_dims[i - 1];
                Some((NormLayer::new(prev), Conv2dLayer::new(prev, c, 2, 2, 0, 1)?))
            };
            let has_sdta = config.sdta_stages.contains(&(i + 1));
            let conv_blocks = if has_sdta {
                config.stage_depths[i] - 1
            } else {
                config.stage_depths[i]
            };
            let mut blocks = Vec::with_capacity(config.stage_depths[i]);
            for _ in 0..conv_blocks {
                blocks.push(Block::Conv(ConvEncoder::new(
                    c,
                    config.conv_kernel_sizes[i],
                    conv_mlp_gamma,
                )?));
            }
            if has_sdta {
                blocks.push(Block::Sdta(SdtaEncoder::new(
                    c,
                    config.sdta_splits,
                    config.num_heads,
                    sdta_ranks,
                )?));
            }
            stages.push(Stage { downsample, blocks });
        }

        let head_gamma = if config.selective {
            None
        } else {
            config.global_gamma
        };
        Ok(EdgeEarModel {
            stem_conv: Conv2dLayer::new(3, config.stage_dims[0], 4, 4, 0, 1)?,
            stem_norm: NormLayer::new(config.stage_dims[0]),
            head_norm: NormLayer::new(config.stage_dims[3]),
            head_linear: ProjLayer::choose(
                config.stage_dims[3],
                config.embedding_dim,
                head_gamma,
            )?,
            stages,
            config,
        })
    }

    /// Initialize all weights from one sequential random stream, drawn in
    /// forward order. Biases, norm parameters, and temperatures keep their
    /// construction values.
    pub fn init(&mut self, seed: u64) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        self.stem_conv.init_with(&mut rng);
        for stage in &mut self.stages {
            if let Some((_, conv)) = &mut stage.downsample {
                conv.init_with(&mut rng);
            }
            for block in &mut stage.blocks {
                match block {
                    Block::Conv(e) => e.init_with(&mut rng),
                    Block::Sdta(e) => e.init_with(&mut rng),
                }
            }
        }
        self.head_linear.init_with(&mut rng);
    }

    /// Convenience constructor: build and initialize in one step.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut model = EdgeEarModel::new(config)?;
        model.init(seed);
        Ok(model)
    }

    /// Record the full forward pass on `tape`, returning the [B, E]
    /// embedding variable. Parameters are registered through `reg`.
    pub fn forward_embed(
        &self,
        tape: &mut GradTape,
        images: &Tensor,
        reg: &mut ParamReg,
    ) -> Result<Var> {
        let s = images.shape();
        let sz = self.config.input_size;
        if s.len() != 4 || s[0] == 0 || s[1] != 3 || s[2] != sz || s[3] != sz {
            return Err(Error::Dimension(format!(
                "model input must be [B, 3, {}, {}] with B > 0, got {:?}",
                sz, sz, s
            )));
        }
        images.check_finite("input images")?;
        let mut x = tape.constant(images);
        x = self.stem_conv.forward_with(tape, x, reg, "stem.conv")?;
        x = self.norm_nchw(tape, x, &self.stem_norm, reg, "stem.norm")?;
        for (i, stage) in self.stages.iter().enumerate() {
            let sidx = i + 1;
            if let Some((norm, conv)) = &stage.downsample {
                x = self.norm_nchw(
                    tape,
                    x,
                    norm,
                    reg,
                    &format!("stage{}.downsample.norm", sidx),
                )?;
                x = conv.forward_with(
                    tape,
                    x,
                    reg,
                    &format!("stage{}.downsample.conv", sidx),
                )?;
            }
            for (j, block) in stage.blocks.iter().enumerate() {
                let prefix = format!("stage{}.block{}", sidx, j + 1);
                x = match block {
                    Block::Conv(e) => e.forward_with(tape, x, reg, &prefix)?,
                    Block::Sdta(e) => e.forward_with(tape, x, reg, &prefix)?,
                };
            }
        }
        let pooled = tape.global_avg_pool(x)?;
        let normed = self.head_norm.forward_with(tape, pooled, reg, "head.norm")?;
        self.head_linear.forward_with(tape, normed, reg, "head.linear")
    }

    fn norm_nchw(
        &self,
        tape: &mut GradTape,
        x: Var,
        norm: &NormLayer,
        reg: &mut ParamReg,
        name: &str,
    ) -> Result<Var> {
        let s = tape.value(x).shape().to_vec();
        let tok = tape.nchw_to_tokens(x)?;
        let tok = norm.forward_with(tape, tok, reg, name)?;
        tape.tokens_to_nchw(tok, s[0], s[1], s[2], s[3])
    }

    /// Inference embeddings for a batch, on a throwaway tape.
    pub fn embed(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = GradTape::new();
        let mut reg = ParamReg::frozen();
        let out = self.forward_embed(&mut tape, images, &mut reg)?;
        Ok(tape.value(out).clone())
    }

    /// Walk every parameter in forward order.
    pub fn visit_params<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.stem_conv.visit("stem.conv", f);
        self.stem_norm.visit("stem.norm", f);
        for (i, stage) in self.stages.iter().enumerate() {
            let sidx = i + 1;
            if let Some((norm, conv)) = &stage.downsample {
                norm.visit(&format!("stage{}.downsample.norm", sidx), f);
                conv.visit(&format!("stage{}.downsample.conv", sidx), f);
            }
            for (j, block) in stage.blocks.iter().enumerate() {
                let prefix = format!("stage{}.block{}", sidx, j + 1);
                match block {
                    Block::Conv(e) => e.visit(&prefix, f),
                    Block::Sdta(e) => e.visit(&prefix, f),
                }
            }
        }
        self.head_norm.visit("head.norm", f);
        self.head_linear.visit("head.linear", f);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.stem_conv.visit_mut("stem.conv", f);
        self.stem_norm.visit_mut("stem.norm", f);
        for (i, stage) in self.stages.iter_mut().enumerate() {
            let sidx = i + 1;
            if let Some((norm, conv)) = &mut stage.downsample {
                norm.visit_mut(&format!("stage{}.downsample.norm", sidx), f);
                conv.visit_mut(&format!("stage{}.downsample.conv", sidx), f);
            }
            for (j, block) in stage.blocks.iter_mut().enumerate() {
                let prefix = format!("stage{}.block{}", sidx, j + 1);
                match block {
                    Block::Conv(e) => e.visit_mut(&prefix, f),
                    Block::Sdta(e) => e.visit_mut(&prefix, f),
                }
            }
        }
        self.head_norm.visit_mut("head.norm", f);
        self.head_linear.visit_mut("head.linear", f);
    }

    pub fn parameter_count(&self) -> usize {
        let mut total = 0;
        self.visit_params(&mut |_, t| total += t.numel());
        total
    }

    /// Write all parameters to a single blob file.
    pub fn save_weights(&self, path: &Path) -> Result<()> {
        let mut entries: Vec<(String, &Tensor)> = Vec::new();
        self.visit_params(&mut |name, t| entries.push((name, t)));
        write_blob(path, &entries)
    }

    /// Load parameters from a blob written by [`EdgeEarModel::save_weights`].
    /// Every model parameter must be present with a matching shape, and the
    /// blob must not contain extras.
    pub fn load_weights(&mut self, path: &Path) -> Result<()> {
        let loaded = read_blob(path)?;
        let mut by_name: HashMap<String, Tensor> = loaded.into_iter().collect();
        let mut err: Option<Error> = None;
        self.visit_params_mut(&mut |name, t| {
            if err.is_some() {
                return;
            }
            match by_name.remove(&name) {
                None => err = Some(Error::Load(format!("weights blob is missing {}", name))),
                Some(src) => {
                    if src.shape() != t.shape() {
                        err = Some(Error::Load(format!(
                            "weights blob has shape {:?} for {}, model expects {:?}",
                            src.shape(),
                            name,
                            t.shape()
                        )));
                    } else {
                        *t = src;
                    }
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if let Some(name) = by_name.keys().next() {
            return Err(Error::Load(format!(
                "weights blob has {} entries not in the model, e.g. {}",
                by_name.len(),
                name
            )));
        }
        Ok(())
    }

    /// The audit graph of this instance, reflecting the layers as built.
    pub fn describe(&self) -> LayerGraph {
        let mut nodes = Vec::new();
        let conv_node = |c: &Conv2dLayer| NodeKind::Conv2d {
            in_ch: c.in_ch,
            out_ch: c.out_ch,
            kernel: c.kernel,
            stride: c.stride,
            padding: c.padding,
            groups: c.groups,
            bias: true,
        };
        let proj_node = |p: &ProjLayer| match p {
            ProjLayer::Full(l) => NodeKind::Linear {
                in_features: l.in_features,
                out_features: l.out_features,
                bias: l.bias.is_some(),
            },
            ProjLayer::Low(l) => NodeKind::LoraLin {
                in_features: l.in_features,
                out_features: l.out_features,
                gamma: l.gamma,
                rank: l.rank,
            },
        };
        let mut push = |name: String, kind: NodeKind| nodes.push(GraphNode { name, kind });

        push("stem.conv".into(), conv_node(&self.stem_conv));
        push(
            "stem.norm".into(),
            NodeKind::LayerNorm {
                features: self.stem_norm.features,
            },
        );
        for (i, stage) in self.stages.iter().enumerate() {
            let sidx = i + 1;
            if let Some((norm, conv)) = &stage.downsample {
                push(
                    format!("stage{}.downsample.norm", sidx),
                    NodeKind::LayerNorm {
                        features: norm.features,
                    },
                );
                push(format!("stage{}.downsample.conv", sidx), conv_node(conv));
            }
            for (j, block) in stage.blocks.iter().enumerate() {
                let prefix = format!("stage{}.block{}", sidx, j + 1);
                match block {
                    Block::Conv(e) => {
                        push(format!("{}.dwconv", prefix), conv_node(&e.dwconv));
                        push(
                            format!("{}.norm", prefix),
                            NodeKind::LayerNorm { features: e.dim },
                        );
                        push(format!("{}.pw1", prefix), proj_node(&e.pw1));
                        push(
                            format!("{}.gelu", prefix),
                            NodeKind::Gelu { features: 4 * e.dim },
                        );
                        push(format!("{}.pw2", prefix), proj_node(&e.pw2));
                        push(
                            format!("{}.residual", prefix),
                            NodeKind::Residual { channels: e.dim },
                        );
                    }
                    Block::Sdta(e) => {
                        for (m, mixer) in e.mixers.iter().enumerate() {
                            push(format!("{}.mix{}", prefix, m + 1), conv_node(mixer));
                        }
                        push(
                            format!("{}.norm_xca", prefix),
                            NodeKind::LayerNorm { features: e.dim },
                        );
                        push(format!("{}.qkv", prefix), proj_node(&e.qkv));
                        push(
                            format!("{}.attention", prefix),
                            NodeKind::ChannelAttention {
                                channels: e.dim,
                                heads: e.heads,
                            },
                        );
                        push(format!("{}.proj", prefix), proj_node(&e.proj));
                        push(
                            format!("{}.residual_xca", prefix),
                            NodeKind::Residual { channels: e.dim },
                        );
                        push(
                            format!("{}.norm_mlp", prefix),
                            NodeKind::LayerNorm { features: e.dim },
                        );
                        push(format!("{}.pw1", prefix), proj_node(&e.pw1));
                        push(
                            format!("{}.gelu", prefix),
                            NodeKind::Gelu { features: 4 * e.dim },
                        );
                        push(format!("{}.pw2", prefix), proj_node(&e.pw2));
                        push(
                            format!("{}.residual", prefix),
                            NodeKind::Residual { channels: e.dim },
                        );
                    }
                }
            }
        }
        push(
            "head.pool".into(),
            NodeKind::GlobalAvgPool {
                channels: self.config.stage_dims[3],
            },
        );
        push(
            "head.norm".into(),
            NodeKind::LayerNorm {
                features: self.head_norm.features,
            },
        );
        push("head.linear".into(), proj_node(&self.head_linear));
        LayerGraph {
            input_size: self.config.input_size,
            nodes,
        }
    }

    /// Dense reference model: every low-rank projection swapped for a
    /// full-rank linear layer of the same shape, weights composed from the
    /// factors. Used to measure what the factorization gives up. The
    /// returned model keeps the source `config`; [`EdgeEarModel::describe`]
    /// reflects the swapped layers.
    pub fn densified(&self) -> Result<EdgeEarModel> {
        let mut dense = self.clone();
        fn densify(p: &mut ProjLayer) -> Result<()> {
            if let ProjLayer::Low(l) = p {
                let mut full = LinearLayer::new(l.in_features, l.out_features, true)?;
                full.weight = l.composed_weight();
                full.bias = Some(l.bias.clone());
                *p = ProjLayer::Full(full);
            }
            Ok(())
        }
        for stage in &mut dense.stages {
            for block in &mut stage.blocks {
                match block {
                    Block::Conv(e) => {
                        densify(&mut e.pw1)?;
                        densify(&mut e.pw2)?;
                    }
                    Block::Sdta(e) => {
                        densify(&mut e.qkv)?;
                        densify(&mut e.proj)?;
                        densify(&mut e.pw1)?;
                        densify(&mut e.pw2)?;
                    }
                }
            }
        }
        densify(&mut dense.head_linear)?;
        Ok(dense)
    }
}
