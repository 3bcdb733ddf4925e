//! Static complexity auditing: parameter counts, multiply-adds, and FLOPs
//! for a layer graph, plus a rank-budget search over the width multiplier.
//!
//! Conventions: one multiply-add is one MAdd; bias additions are free;
//! normalizations, activations, softmax, and residual adds contribute one
//! FLOP per output element on top of 2 * MAdds.

use crate::backbone::ModelConfig;
use crate::error::{Error, Result};
use crate::loralin::rank_for;
use crate::tensor::conv_out_dim;
use serde::{Deserialize, Serialize};

/// One node of the audit graph, in forward order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NodeKind {
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        bias: bool,
    },
    Linear {
        in_features: usize,
        out_features: usize,
        bias: bool,
    },
    LoraLin {
        in_features: usize,
        out_features: usize,
        gamma: f64,
        rank: usize,
    },
    LayerNorm {
        features: usize,
    },
    /// Cross-covariance attention core: per-head temperatures, the two
    /// channel-by-channel matrix products, q/k normalization and softmax.
    ChannelAttention {
        channels: usize,
        heads: usize,
    },
    Gelu {
        features: usize,
    },
    Residual {
        channels: usize,
    },
    GlobalAvgPool {
        channels: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub name: String,
    pub kind: NodeKind,
}

/// Ordered layer graph with the input resolution it was built for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGraph {
    pub input_size: usize,
    pub nodes: Vec<GraphNode>,
}

/// Per-layer cost row.
#[derive(Debug, Clone, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub kind: String,
    pub params: usize,
    pub madds: u64,
    pub flops: u64,
}

/// Full audit: totals plus the per-layer breakdown that sums to them.
#[derive(Debug, Clone, Serialize)]
pub struct CostReport {
    pub params: usize,
    pub madds: u64,
    pub flops: u64,
    /// Elementwise FLOPs beyond 2 * MAdds.
    pub surcharge: u64,
    pub per_layer: Vec<LayerCost>,
}

fn kind_label(kind: &NodeKind) -> &'static str {
    match kind {
        NodeKind::Conv2d { .. } => "conv2d",
        NodeKind::Linear { .. } => "linear",
        NodeKind::LoraLin { .. } => "loralin",
        NodeKind::LayerNorm { .. } => "layer_norm",
        NodeKind::ChannelAttention { .. } => "channel_attention",
        NodeKind::Gelu { .. } => "gelu",
        NodeKind::Residual { .. } => "residual",
        NodeKind::GlobalAvgPool { .. } => "global_avg_pool",
    }
}

fn node_params(kind: &NodeKind) -> usize {
    match *kind {
        NodeKind::Conv2d {
            in_ch,
            out_ch,
            kernel,
            groups,
            bias,
            ..
        } => kernel * kernel * (in_ch / groups) * out_ch + if bias { out_ch } else { 0 },
        NodeKind::Linear {
            in_features,
            out_features,
            bias,
        } => in_features * out_features + if bias { out_features } else { 0 },
        NodeKind::LoraLin {
            in_features,
            out_features,
            rank,
            ..
        } => rank * in_features + out_features * rank + out_features,
        NodeKind::LayerNorm { features } => 2 * features,
        NodeKind::ChannelAttention { heads, .. } => heads,
        NodeKind::Gelu { .. } | NodeKind::Residual { .. } | NodeKind::GlobalAvgPool { .. } => 0,
    }
}

/// Audit a layer graph at its recorded input resolution.
pub fn audit(graph: &LayerGraph) -> Result<CostReport> {
    if graph.input_size == 0 {
        return Err(Error::Analysis("audit: input size must be positive".into()));
    }
    let mut h = graph.input_size;
    let mut w = graph.input_size;
    let mut per_layer = Vec::with_capacity(graph.nodes.len());
    let (mut params, mut madds, mut surcharge) = (0usize, 0u64, 0u64);
    for node in &graph.nodes {
        let s = (h * w) as u64;
        let p = node_params(&node.kind);
        let (m, e) = match node.kind {
            NodeKind::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
                groups,
                ..
            } => {
                if h + 2 * padding < kernel || w + 2 * padding < kernel {
                    return Err(Error::Analysis(format!(
                        "audit: node {} kernel {} exceeds {}x{} input",
                        node.name, kernel, h, w
                    )));
                }
                h = conv_out_dim(h, kernel, stride, padding);
                w = conv_out_dim(w, kernel, stride, padding);
                let s_out = (h * w) as u64;
                (
                    (kernel * kernel * (in_ch / groups) * out_ch) as u64 * s_out,
                    0,
                )
            }
            NodeKind::Linear {
                in_features,
                out_features,
                ..
            } => ((in_features * out_features) as u64 * s, 0),
            NodeKind::LoraLin {
                in_features,
                out_features,
                rank,
                ..
            } => (
                ((rank * in_features + out_features * rank) as u64) * s,
                0,
            ),
            NodeKind::LayerNorm { features } => (0, features as u64 * s),
            NodeKind::ChannelAttention { channels, heads } => {
                let dh = (channels / heads) as u64;
                let core = 2 * (channels as u64) * (channels as u64) * s / heads as u64;
                // q/k normalization plus temperature scaling and softmax of
                // the per-head channel map
                let elem = 2 * channels as u64 * s + 2 * heads as u64 * dh * dh;
                (core, elem)
            }
            NodeKind::Gelu { features } => (0, features as u64 * s),
            NodeKind::Residual { channels } => (0, channels as u64 * s),
            NodeKind::GlobalAvgPool { channels } => {
                let e = channels as u64 * s;
                h = 1;
                w = 1;
                (0, e)
            }
        };
        params += p;
        madds += m;
        surcharge += e;
        per_layer.push(LayerCost {
            name: node.name.clone(),
            kind: kind_label(&node.kind).to_string(),
            params: p,
            madds: m,
            flops: 2 * m + e,
        });
    }
    Ok(CostReport {
        params,
        madds,
        flops: 2 * madds + surcharge,
        surcharge,
        per_layer,
    })
}

/// Total trainable parameters of a graph. Resolution-independent.
pub fn count_params(graph: &LayerGraph) -> usize {
    graph.nodes.iter().map(|n| node_params(&n.kind)).sum()
}

/// Total multiply-adds of a graph at its input resolution.
pub fn count_madds(graph: &LayerGraph) -> Result<u64> {
    Ok(audit(graph)?.madds)
}

/// Build the audit graph for a configuration without instantiating weights.
pub fn graph_from_config(config: &ModelConfig) -> Result<LayerGraph> {
    config.validate()?;
    let mut nodes = Vec::new();
    let push = |nodes: &mut Vec<GraphNode>, name: String, kind: NodeKind| {
        nodes.push(GraphNode { name, kind });
    };
    let lin_or_lora = |nodes: &mut Vec<GraphNode>,
                       name: String,
                       n: usize,
                       m: usize,
                       gamma: Option<f64>|
     -> Result<()> {
        match gamma {
            None => push(
                nodes,
                name,
                NodeKind::Linear {
                    in_features: n,
                    out_features: m,
                    bias: true,
                },
            ),
            Some(g) => push(
                nodes,
                name,
                NodeKind::LoraLin {
                    in_features: n,
                    out_features: m,
                    gamma: g,
                    rank: rank_for(m, n, g)?,
                },
            ),
        }
        Ok(())
    };

    push(
        &mut nodes,
        "stem.conv".into(),
        NodeKind::Conv2d {
            in_ch: 3,
            out_ch: config.stage_dims[0],
            kernel: 4,
            stride: 4,
            padding: 0,
            groups: 1,
            bias: true,
        },
    );
    push(
        &mut nodes,
        "stem.norm".into(),
        NodeKind::LayerNorm {
            features: config.stage_dims[0],
        },
    );

    for i in 0..4 {
        let c = config.stage_dims[i];
        let stage = i + 1;
        if i > 0 {
            let prev = config.stage_dims[i - 1];
            push(
                &mut nodes,
                format!("stage{}.downsample.norm", stage),
                NodeKind::LayerNorm { features: prev },
            );
            push(
                &mut nodes,
                format!("stage{}.downsample.conv", stage),
                NodeKind::Conv2d {
                    in_ch: prev,
                    out_ch: c,
                    kernel: 2,
                    stride: 2,
                    padding: 0,
                    groups: 1,
                    bias: true,
                },
            );
        }
        let has_sdta = config.sdta_stages.contains(&stage);
        let conv_blocks = if has_sdta {
            config.stage_depths[i] - 1
        } else {
            config.stage_depths[i]
        };
        let k = config.conv_kernel_sizes[i];
        let conv_mlp_gamma = if config.selective {
            None
        } else {
            config.global_gamma
        };
        for b in 1..=conv_blocks {
            let prefix = format!("stage{}.block{}", stage, b);
            push(
                &mut nodes,
                format!("{}.dwconv", prefix),
                NodeKind::Conv2d {
                    in_ch: c,
                    out_ch: c,
                    kernel: k,
                    stride: 1,
                    padding: (k - 1) / 2,
                    groups: c,
                    bias: true,
                },
            );
            push(
                &mut nodes,
                format!("{}.norm", prefix),
                NodeKind::LayerNorm { features: c },
            );
            lin_or_lora(&mut nodes, format!("{}.pw1", prefix), c, 4 * c, conv_mlp_gamma)?;
            push(
                &mut nodes,
                format!("{}.gelu", prefix),
                NodeKind::Gelu { features: 4 * c },
            );
            lin_or_lora(&mut nodes, format!("{}.pw2", prefix), 4 * c, c, conv_mlp_gamma)?;
            push(
                &mut nodes,
                format!("{}.residual", prefix),
                NodeKind::Residual { channels: c },
            );
        }
        if has_sdta {
            let b = config.stage_depths[i];
            let prefix = format!("stage{}.block{}", stage, b);
            let width = c / config.sdta_splits;
            for m in 1..config.sdta_splits {
                push(
                    &mut nodes,
                    format!("{}.mix{}", prefix, m),
                    NodeKind::Conv2d {
                        in_ch: width,
                        out_ch: width,
                        kernel: 3,
                        stride: 1,
                        padding: 1,
                        groups: width,
                        bias: true,
                    },
                );
            }
            let (qkv_gamma, mlp_gamma, proj_gamma) = if config.selective {
                (Some(config.qkv_gamma), Some(config.mlp_gamma), None)
            } else {
                (config.global_gamma, config.global_gamma, config.global_gamma)
            };
            push(
                &mut nodes,
                format!("{}.norm_xca", prefix),
                NodeKind::LayerNorm { features: c },
            );
            lin_or_lora(&mut nodes, format!("{}.qkv", prefix), c, 3 * c, qkv_gamma)?;
            push(
                &mut nodes,
                format!("{}.attention", prefix),
                NodeKind::ChannelAttention {
                    channels: c,
                    heads: config.num_heads,
                },
            );
            lin_or_lora(&mut nodes, format!("{}.proj", prefix), c, c, proj_gamma)?;
            push(
                &mut nodes,
                format!("{}.residual_xca", prefix),
                NodeKind::Residual { channels: c },
            );
            push(
                &mut nodes,
                format!("{}.norm_mlp", prefix),
                NodeKind::LayerNorm { features: c },
            );
            lin_or_lora(&mut nodes, format!("{}.pw1", prefix), c, 4 * c, mlp_gamma)?;
            push(
                &mut nodes,
                format!("{}.gelu", prefix),
                NodeKind::Gelu { features: 4 * c },
            );
            lin_or_lora(&mut nodes, format!("{}.pw2", prefix), 4 * c, c, mlp_gamma)?;
            push(
                &mut nodes,
                format!("{}.residual", prefix),
                NodeKind::Residual { channels: c },
            );
        }
    }

    push(
        &mut nodes,
        "head.pool".into(),
        NodeKind::GlobalAvgPool {
            channels: config.stage_dims[3],
        },
    );
    push(
        &mut nodes,
        "head.norm".into(),
        NodeKind::LayerNorm {
            features: config.stage_dims[3],
        },
    );
    let head_gamma = if config.selective {
        None
    } else {
        config.global_gamma
    };
    lin_or_lora(
        &mut nodes,
        "head.linear".into(),
        config.stage_dims[3],
        config.embedding_dim,
        head_gamma,
    )?;

    Ok(LayerGraph {
        input_size: config.input_size,
        nodes,
    })
}

/// Largest width multiplier on the 0.01 grid whose non-selective low-rank
/// variant of `config` stays within `budget` parameters.
pub fn gamma_for_budget(config: &ModelConfig, budget: usize) -> Result<f64> {
    if budget == 0 {
        return Err(Error::Analysis("gamma_for_budget: budget must be positive".into()));
    }
    let mut template = config.clone();
    template.selective = false;
    for k in (1..=100u32).rev() {
        let gamma = k as f64 / 100.0;
        template.global_gamma = Some(gamma);
        let params = count_params(&graph_from_config(&template)?);
        if params <= budget {
            return Ok(gamma);
        }
    }
    Err(Error::Analysis(format!(
        "gamma_for_budget: no grid ratio fits {} parameters",
        budget
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ModelConfig;

    #[test]
    fn default_config_matches_derived_totals() {
        let graph = graph_from_config(&ModelConfig::default()).unwrap();
        let report = audit(&graph).unwrap();
        assert_eq!(report.params, 1_989_196);
        assert_eq!(report.madds, 122_090_656);
        assert_eq!(report.flops, 2 * report.madds + report.surcharge);
        assert!((report.surcharge as f64) < 0.02 * report.flops as f64);
    }

    #[test]
    fn totals_equal_per_layer_sums() {
        let graph = graph_from_config(&ModelConfig::default()).unwrap();
        let report = audit(&graph).unwrap();
        let p: usize = report.per_layer.iter().map(|l| l.params).sum();
        let m: u64 = report.per_layer.iter().map(|l| l.madds).sum();
        let f: u64 = report.per_layer.iter().map(|l| l.flops).sum();
        assert_eq!(p, report.params);
        assert_eq!(m, report.madds);
        assert_eq!(f, report.flops);
    }

    #[test]
    fn removing_a_shape_neutral_node_subtracts_its_row() {
        let graph = graph_from_config(&ModelConfig::default()).unwrap();
        let full = audit(&graph).unwrap();
        for (i, node) in graph.nodes.iter().enumerate() {
            let shape_neutral = !matches!(
                node.kind,
                NodeKind::Conv2d { .. } | NodeKind::GlobalAvgPool { .. }
            );
            if !shape_neutral {
                continue;
            }
            let mut pruned = graph.clone();
            pruned.nodes.remove(i);
            let partial = audit(&pruned).unwrap();
            assert_eq!(full.params - partial.params, full.per_layer[i].params);
            assert_eq!(full.madds - partial.madds, full.per_layer[i].madds);
            assert_eq!(full.flops - partial.flops, full.per_layer[i].flops);
        }
    }

    #[test]
    fn json_round_trip_preserves_graph() {
        let graph = graph_from_config(&ModelConfig::default()).unwrap();
        let text = serde_json::to_string(&graph).unwrap();
        let back: LayerGraph = serde_json::from_str(&text).unwrap();
        assert_eq!(back, graph);
    }

    #[test]
    fn non_selective_sweep_is_strictly_increasing() {
        let mut cfg = ModelConfig::default();
        cfg.selective = false;
        let expected = [
            (0.50, 1_406_684usize),
            (0.60, 1_642_844),
            (0.70, 1_879_004),
            (0.75, 2_006_804),
        ];
        let mut prev = 0;
        for (gamma, want) in expected {
            cfg.global_gamma = Some(gamma);
            let p = count_params(&graph_from_config(&cfg).unwrap());
            assert_eq!(p, want, "gamma {}", gamma);
            assert!(p > prev);
            prev = p;
        }
    }

    #[test]
    fn budget_search_finds_two_million_crossing() {
        let cfg = ModelConfig::default();
        let g = gamma_for_budget(&cfg, 2_000_000).unwrap();
        assert!((g - 0.74).abs() < 1e-12, "got {}", g);
        // a budget equal to the gamma = 1.0 count returns 1.0
        let mut full = cfg.clone();
        full.selective = false;
        full.global_gamma = Some(1.0);
        let full_params = count_params(&graph_from_config(&full).unwrap());
        assert_eq!(gamma_for_budget(&cfg, full_params).unwrap(), 1.0);
        // an impossible budget is an analysis error
        assert!(gamma_for_budget(&cfg, 10).is_err());
    }

    #[test]
    fn madds_scale_with_resolution() {
        let mut cfg = ModelConfig::default();
        cfg.input_size = 64;
        let g64 = graph_from_config(&cfg).unwrap();
        let m64 = count_madds(&g64).unwrap();
        cfg.input_size = 128;
        let g128 = graph_from_config(&cfg).unwrap();
        let m128 = count_madds(&g128).unwrap();
        // conv/attention costs scale with area; the head linear does not
        assert!(m128 > 3 * m64 && m128 < 4 * m64 + 1_000_000);
    }
}
