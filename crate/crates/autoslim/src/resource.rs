//! Deterministic resource costs for a (network, channel configuration) pair.
//!
//! Multiply-Adds and parameters follow the usual conventions: BN layers are
//! excluded entirely (they fuse into the preceding convolution), biases are
//! counted, elementwise/pooling layers are free. Memory counts elements of
//! all feature maps plus all weights, with no liveness analysis; bn/relu are
//! treated as in-place and do not add a map.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

use crate::netspec::{ChannelConfig, LayerKind, Network};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResourceReport {
    /// Multiply-Add count.
    pub madds: u64,
    /// Weights including biases, excluding BN.
    pub params: u64,
    /// Elements of all feature maps + all weights.
    pub memory: u64,
    /// Bytes at 4 bytes per parameter.
    pub model_size: u64,
    /// Weighted MAdds: depthwise layers are FLOPs-to-latency outliers, so
    /// their MAdds count (1 + alpha) times.
    pub latency_proxy: f64,
}

impl ResourceReport {
    pub fn metric(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Madds => self.madds as f64,
            Metric::Params => self.params as f64,
            Metric::Memory => self.memory as f64,
            Metric::ModelSize => self.model_size as f64,
            Metric::LatencyProxy => self.latency_proxy,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Madds,
    Params,
    Memory,
    ModelSize,
    LatencyProxy,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Metric::Madds => "madds",
            Metric::Params => "params",
            Metric::Memory => "memory",
            Metric::ModelSize => "model_size",
            Metric::LatencyProxy => "latency_proxy",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum ResourceError {
    #[error("unknown metric name: {0}")]
    UnknownMetric(String),
    #[error("budget must look like metric=value, got {0}")]
    BadBudget(String),
    #[error("shape mismatch at layer {layer}: {a:?} vs {b:?}")]
    ShapeMismatch {
        layer: String,
        a: (usize, usize, usize),
        b: (usize, usize, usize),
    },
}

impl FromStr for Metric {
    type Err = ResourceError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "madds" => Ok(Metric::Madds),
            "params" => Ok(Metric::Params),
            "memory" => Ok(Metric::Memory),
            "model_size" => Ok(Metric::ModelSize),
            "latency_proxy" => Ok(Metric::LatencyProxy),
            other => Err(ResourceError::UnknownMetric(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub metric: Metric,
    pub limit: f64,
}

impl Budget {
    /// Parse "metric=value", e.g. "madds=2.0e7".
    pub fn parse(s: &str) -> Result<Self, ResourceError> {
        let (name, value) = s
            .split_once('=')
            .ok_or_else(|| ResourceError::BadBudget(s.to_string()))?;
        let metric = name.trim().parse()?;
        let limit: f64 = value
            .trim()
            .parse()
            .map_err(|_| ResourceError::BadBudget(s.to_string()))?;
        Ok(Budget { metric, limit })
    }
}

impl fmt::Display for Budget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}={}", self.metric, self.limit)
    }
}

/// Inclusive budget check.
pub fn budget_satisfied(report: &ResourceReport, budget: &Budget) -> bool {
    report.metric(budget.metric) <= budget.limit
}

/// Default weighting of depthwise MAdds in the latency proxy.
pub const DEFAULT_DW_ALPHA: f64 = 3.0;

/// Per-layer breakdown backing the `cost-report` CLI table.
#[derive(Debug, Clone)]
pub struct LayerCost {
    pub id: String,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub madds: u64,
    pub params: u64,
}

/// Output shape (C, H, W) per layer, index-aligned with `spec.layers`.
///
/// Strided conv/dwconv use "same" padding: `H_out = ceil(H / stride)`.
pub fn shape_inference(
    net: &Network,
    config: &ChannelConfig,
    input_shape: (usize, usize, usize),
) -> Result<Vec<(usize, usize, usize)>, ResourceError> {
    let layers = &net.spec.layers;
    let mut shapes: Vec<(usize, usize, usize)> = vec![(0, 0, 0); layers.len()];
    for &i in net.topo_order() {
        let l = &layers[i];
        let in_shape = if i == net.source() {
            input_shape
        } else {
            shapes[net.layer_inputs(i)[0]]
        };
        let c_out = config.channels(net, &l.channel_set);
        shapes[i] = match l.kind {
            LayerKind::Conv | LayerKind::Dwconv => {
                let h = (in_shape.1 + l.stride - 1) / l.stride;
                let w = (in_shape.2 + l.stride - 1) / l.stride;
                (c_out, h, w)
            }
            LayerKind::Fc => (c_out, 1, 1),
            LayerKind::AvgpoolGlobal => (in_shape.0, 1, 1),
            LayerKind::Relu | LayerKind::Bn | LayerKind::SoftmaxXent => in_shape,
            LayerKind::Add => {
                let ins = net.layer_inputs(i);
                let (a, b) = (shapes[ins[0]], shapes[ins[1]]);
                if a != b {
                    return Err(ResourceError::ShapeMismatch {
                        layer: l.id.clone(),
                        a,
                        b,
                    });
                }
                a
            }
        };
    }
    Ok(shapes)
}

/// Per-layer costs plus shapes, shared by `cost` and the CLI report.
pub fn layer_costs(
    net: &Network,
    config: &ChannelConfig,
    input_shape: (usize, usize, usize),
) -> Result<Vec<LayerCost>, ResourceError> {
    let shapes = shape_inference(net, config, input_shape)?;
    let layers = &net.spec.layers;
    let mut out = Vec::with_capacity(layers.len());
    for (i, l) in layers.iter().enumerate() {
        let in_shape = if i == net.source() {
            input_shape
        } else {
            shapes[net.layer_inputs(i)[0]]
        };
        let (c_out, h, w) = shapes[i];
        let k2 = (l.kernel * l.kernel) as u64;
        let (madds, params) = match l.kind {
            LayerKind::Conv => {
                let (ci, co, hw) = (in_shape.0 as u64, c_out as u64, (h * w) as u64);
                (k2 * ci * co * hw, k2 * ci * co + co)
            }
            LayerKind::Dwconv => {
                let (c, hw) = (c_out as u64, (h * w) as u64);
                (k2 * c * hw, k2 * c + c)
            }
            LayerKind::Fc => {
                let ci = (in_shape.0 * in_shape.1 * in_shape.2) as u64;
                let co = c_out as u64;
                (ci * co, ci * co + co)
            }
            // BN fuses into the preceding conv; elementwise/pool are free.
            LayerKind::Relu
            | LayerKind::AvgpoolGlobal
            | LayerKind::Bn
            | LayerKind::SoftmaxXent
            | LayerKind::Add => (0, 0),
        };
        out.push(LayerCost {
            id: l.id.clone(),
            c_in: in_shape.0,
            c_out,
            h,
            w,
            madds,
            params,
        });
    }
    Ok(out)
}

/// Price a configuration with the default latency weighting.
pub fn cost(
    net: &Network,
    config: &ChannelConfig,
    input_shape: (usize, usize, usize),
) -> Result<ResourceReport, ResourceError> {
    cost_with_alpha(net, config, input_shape, DEFAULT_DW_ALPHA)
}

pub fn cost_with_alpha(
    net: &Network,
    config: &ChannelConfig,
    input_shape: (usize, usize, usize),
    dw_alpha: f64,
) -> Result<ResourceReport, ResourceError> {
    let per_layer = layer_costs(net, config, input_shape)?;
    let mut madds = 0u64;
    let mut params = 0u64;
    let mut maps = (input_shape.0 * input_shape.1 * input_shape.2) as u64;
    let mut latency = 0.0f64;
    for (l, c) in net.spec.layers.iter().zip(&per_layer) {
        madds += c.madds;
        params += c.params;
        let weight = if l.kind == LayerKind::Dwconv {
            1.0 + dw_alpha
        } else {
            1.0
        };
        latency += c.madds as f64 * weight;
        // bn/relu run in place and the loss head is not a feature map.
        if !matches!(
            l.kind,
            LayerKind::Bn | LayerKind::Relu | LayerKind::SoftmaxXent
        ) {
            maps += (c.c_out * c.h * c.w) as u64;
        }
    }
    Ok(ResourceReport {
        madds,
        params,
        memory: maps + params,
        model_size: params * 4,
        latency_proxy: latency,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netspec::{max_config, parse_spec};

    fn chain_doc(layers: &str, edges: &str) -> String {
        format!(
            r#"{{
            "input_shape": [3, 32, 32],
            "num_classes": 4,
            "bounds": {{"lower": 0.25, "upper": 1.5, "groups": 6}},
            "layers": [{layers}],
            "edges": [{edges}]
        }}"#
        )
    }

    #[test]
    fn same_padding_stride_arithmetic() {
        let doc = chain_doc(
            r#"{"id": "c1", "kind": "conv", "kernel": 3, "stride": 2, "base_channels": 16, "slimmable": false, "channel_set": "s0"},
               {"id": "fc", "kind": "fc", "base_channels": 4, "slimmable": false, "channel_set": "out"}"#,
            r#"["c1", "fc"]"#,
        );
        let net = parse_spec(&doc).unwrap();
        let cfg = max_config(&net, net.bounds());
        let shapes = shape_inference(&net, &cfg, (3, 32, 32)).unwrap();
        assert_eq!(shapes[0], (16, 16, 16));
    }

    #[test]
    fn global_avgpool_shape() {
        let doc = chain_doc(
            r#"{"id": "c1", "kind": "conv", "kernel": 1, "base_channels": 96, "slimmable": false, "channel_set": "s0"},
               {"id": "gap", "kind": "avgpool_global", "base_channels": 96, "slimmable": false, "channel_set": "s0"},
               {"id": "fc", "kind": "fc", "base_channels": 4, "slimmable": false, "channel_set": "out"}"#,
            r#"["c1", "gap"], ["gap", "fc"]"#,
        );
        let net = parse_spec(&doc).unwrap();
        let cfg = max_config(&net, net.bounds());
        let shapes = shape_inference(&net, &cfg, (96, 7, 7)).unwrap();
        assert_eq!(shapes[1], (96, 1, 1));
    }

    #[test]
    fn unit_conv_cost() {
        // 1x1 conv, C_in=1, C_out=1 on a 1x1 map: 1 MAdd, 2 params.
        let doc = r#"{
            "input_shape": [1, 1, 1],
            "num_classes": 1,
            "bounds": {"lower": 0.25, "upper": 1.5, "groups": 2},
            "layers": [
                {"id": "c1", "kind": "conv", "kernel": 1, "base_channels": 1, "slimmable": false, "channel_set": "out"}
            ],
            "edges": []
        }"#;
        let net = parse_spec(doc).unwrap();
        let cfg = max_config(&net, net.bounds());
        let r = cost(&net, &cfg, (1, 1, 1)).unwrap();
        assert_eq!(r.madds, 1);
        assert_eq!(r.params, 2);
        assert_eq!(r.model_size, 8);
    }

    #[test]
    fn conv_cost_formula() {
        // 3x3 conv, C_in=8, C_out=16, output 32x32.
        let doc = r#"{
            "input_shape": [8, 32, 32],
            "num_classes": 16,
            "bounds": {"lower": 0.25, "upper": 1.5, "groups": 2},
            "layers": [
                {"id": "c1", "kind": "conv", "kernel": 3, "base_channels": 16, "slimmable": false, "channel_set": "out"}
            ],
            "edges": []
        }"#;
        let net = parse_spec(doc).unwrap();
        let cfg = max_config(&net, net.bounds());
        let r = cost(&net, &cfg, (8, 32, 32)).unwrap();
        assert_eq!(r.madds, 9 * 8 * 16 * 1024);
    }

    #[test]
    fn budget_boundary_is_inclusive() {
        let r = ResourceReport {
            madds: 300_000_000,
            params: 0,
            memory: 0,
            model_size: 0,
            latency_proxy: 0.0,
        };
        let b = Budget {
            metric: Metric::Madds,
            limit: 300e6,
        };
        assert!(budget_satisfied(&r, &b));
        let r2 = ResourceReport {
            madds: 305_000_000,
            ..r
        };
        assert!(!budget_satisfied(&r2, &b));
    }

    #[test]
    fn unknown_metric_is_an_error() {
        assert!(matches!(
            Budget::parse("watts=3"),
            Err(ResourceError::UnknownMetric(_))
        ));
        assert!(Budget::parse("madds=2.0e7").is_ok());
    }

    #[test]
    fn bn_layers_change_nothing_but_memory() {
        let without = chain_doc(
            r#"{"id": "c1", "kind": "conv", "kernel": 3, "base_channels": 16, "slimmable": false, "channel_set": "s0"},
               {"id": "fc", "kind": "fc", "base_channels": 4, "slimmable": false, "channel_set": "out"}"#,
            r#"["c1", "fc"]"#,
        );
        let with = chain_doc(
            r#"{"id": "c1", "kind": "conv", "kernel": 3, "base_channels": 16, "slimmable": false, "channel_set": "s0"},
               {"id": "b1", "kind": "bn", "base_channels": 16, "slimmable": false, "channel_set": "s0"},
               {"id": "fc", "kind": "fc", "base_channels": 4, "slimmable": false, "channel_set": "out"}"#,
            r#"["c1", "b1"], ["b1", "fc"]"#,
        );
        let n1 = parse_spec(&without).unwrap();
        let n2 = parse_spec(&with).unwrap();
        let r1 = cost(&n1, &max_config(&n1, n1.bounds()), (3, 32, 32)).unwrap();
        let r2 = cost(&n2, &max_config(&n2, n2.bounds()), (3, 32, 32)).unwrap();
        assert_eq!(r1.madds, r2.madds);
        assert_eq!(r1.params, r2.params);
        assert_eq!(r1.model_size, r2.model_size);
        assert_eq!(r1.memory, r2.memory);
    }

    #[test]
    fn madds_linear_in_output_channels() {
        let mk = |c: usize| {
            let doc = format!(
                r#"{{
                "input_shape": [8, 16, 16],
                "num_classes": {c},
                "bounds": {{"lower": 0.25, "upper": 1.5, "groups": 2}},
                "layers": [
                    {{"id": "c1", "kind": "conv", "kernel": 3, "base_channels": {c}, "slimmable": false, "channel_set": "out"}}
                ],
                "edges": []
            }}"#
            );
            let net = parse_spec(&doc).unwrap();
            let cfg = max_config(&net, net.bounds());
            cost(&net, &cfg, (8, 16, 16)).unwrap().madds
        };
        assert_eq!(mk(32), 2 * mk(16));
    }

    #[test]
    fn dwconv_weighs_more_in_latency_proxy() {
        let doc = chain_doc(
            r#"{"id": "c1", "kind": "conv", "kernel": 1, "base_channels": 16, "slimmable": false, "channel_set": "s0"},
               {"id": "d1", "kind": "dwconv", "kernel": 3, "base_channels": 16, "slimmable": false, "channel_set": "s0"},
               {"id": "fc", "kind": "fc", "base_channels": 4, "slimmable": false, "channel_set": "out"}"#,
            r#"["c1", "d1"], ["d1", "fc"]"#,
        );
        let net = parse_spec(&doc).unwrap();
        let cfg = max_config(&net, net.bounds());
        let costs = layer_costs(&net, &cfg, (3, 32, 32)).unwrap();
        let r = cost(&net, &cfg, (3, 32, 32)).unwrap();
        let expected = costs[0].madds as f64
            + costs[1].madds as f64 * (1.0 + DEFAULT_DW_ALPHA)
            + costs[2].madds as f64;
        assert_eq!(r.latency_proxy, expected);
    }
}
