//! Network architectures, channel-sets and the search space they induce.
//!
//! A layer's output belongs to a *channel-set*: the unit whose width the
//! search controls. Layers forced to share one channel count (a residual
//! identity pathway, a depthwise conv and the pointwise conv feeding it)
//! simply name the same set. Widths are quantized to `groups` even channel
//! groups of the maximum-width (upper bound) allocation, so a configuration
//! is just "active group count per set".

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    Dwconv,
    Fc,
    Relu,
    AvgpoolGlobal,
    Bn,
    SoftmaxXent,
    Add,
}

impl LayerKind {
    /// Kinds that carry trainable weights.
    pub fn has_weights(self) -> bool {
        matches!(self, LayerKind::Conv | LayerKind::Dwconv | LayerKind::Fc)
    }

    /// Kinds whose output channel count always equals the input's, and whose
    /// `channel_set` must therefore match the feeding layer's.
    pub fn preserves_channels(self) -> bool {
        matches!(
            self,
            LayerKind::Dwconv
                | LayerKind::Relu
                | LayerKind::AvgpoolGlobal
                | LayerKind::Bn
                | LayerKind::SoftmaxXent
                | LayerKind::Add
        )
    }
}

fn default_one() -> usize {
    1
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: String,
    pub kind: LayerKind,
    /// Kernel size, conv/dwconv only. Must be odd ("same" padding).
    #[serde(default = "default_one")]
    pub kernel: usize,
    #[serde(default = "default_one")]
    pub stride: usize,
    /// Output channels at 1.0x width; for fc, output units.
    pub base_channels: usize,
    #[serde(default = "default_true")]
    pub slimmable: bool,
    /// Identifier of the shared channel-set this layer's output belongs to.
    pub channel_set: String,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct WidthBounds {
    pub lower: f64,
    pub upper: f64,
    /// Channel groups per slimmable channel-set.
    pub groups: usize,
}

impl WidthBounds {
    /// Smallest legal group count: at least one group, and no narrower than
    /// `lower/upper` of the maximum-width allocation.
    pub fn k_min(&self) -> usize {
        let k = (self.groups as f64 * self.lower / self.upper).ceil() as usize;
        k.max(1)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_shape: (usize, usize, usize),
    pub num_classes: usize,
    pub bounds: WidthBounds,
    pub layers: Vec<LayerSpec>,
    pub edges: Vec<(String, String)>,
    #[serde(default)]
    pub residual_ties: Vec<Vec<String>>,
}

/// One channel-set of a validated spec, with its group arithmetic resolved
/// against the width bounds.
#[derive(Debug, Clone)]
pub struct ChannelSet {
    pub id: String,
    pub base_channels: usize,
    pub slimmable: bool,
    /// Channels allocated in the weight store: `round(base * upper)` when
    /// slimmable, `base_channels` otherwise.
    pub max_channels: usize,
    /// `max_channels / groups`; meaningful for slimmable sets only.
    pub group_size: usize,
    /// True when the set is a residual identity pathway (listed in
    /// `residual_ties`); pathway sets are sampled before block-interior ones.
    pub pathway: bool,
}

/// Validated spec plus everything derived from it: topological order,
/// per-layer inputs, and the channel-set table in spec (first-occurrence)
/// order.
#[derive(Debug, Clone)]
pub struct Network {
    pub spec: NetworkSpec,
    sets: Vec<ChannelSet>,
    set_index: HashMap<String, usize>,
    layer_index: HashMap<String, usize>,
    /// Per layer, indices of its input layers in `spec.layers` order.
    inputs: Vec<Vec<usize>>,
    topo: Vec<usize>,
    source: usize,
    sink: usize,
}

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("layer {layer}: {msg}")]
    Layer { layer: String, msg: String },
    #[error("cycle involving layer {layer}")]
    Cycle { layer: String },
    #[error("channel-set {set}: max width {max_channels} not divisible into {groups} groups (layer {layer})")]
    IndivisibleGroups {
        set: String,
        max_channels: usize,
        groups: usize,
        layer: String,
    },
    #[error("add layer {layer} joins different channel-sets ({a} vs {b})")]
    AddMismatch { layer: String, a: String, b: String },
    #[error("{0}")]
    Structure(String),
    #[error("width multiplier {m} outside bounds [{lower}, {upper}]")]
    WidthOutOfBounds { m: f64, lower: f64, upper: f64 },
}

fn layer_err(layer: &str, msg: impl Into<String>) -> SpecError {
    SpecError::Layer {
        layer: layer.to_string(),
        msg: msg.into(),
    }
}

/// The search point: active group count per slimmable channel-set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub active_groups: BTreeMap<String, usize>,
}

impl ChannelConfig {
    pub fn groups_for(&self, set: &str) -> Option<usize> {
        self.active_groups.get(set).copied()
    }

    /// Active output channels of `set` under this config.
    pub fn channels(&self, net: &Network, set: &str) -> usize {
        let cs = net.channel_set(set).expect("unknown channel-set");
        match self.active_groups.get(set) {
            Some(&k) => k * cs.group_size,
            None => cs.max_channels,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.active_groups).expect("config serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, SpecError> {
        let active_groups: BTreeMap<String, usize> =
            serde_json::from_str(s).map_err(|e| SpecError::Syntax(e.to_string()))?;
        Ok(ChannelConfig { active_groups })
    }
}

/// Parse and validate a spec-file document.
pub fn parse_spec(document: &str) -> Result<Network, SpecError> {
    let spec: NetworkSpec =
        serde_json::from_str(document).map_err(|e| SpecError::Syntax(e.to_string()))?;
    Network::new(spec)
}

impl Network {
    pub fn new(spec: NetworkSpec) -> Result<Self, SpecError> {
        let n = spec.layers.len();
        if n == 0 {
            return Err(SpecError::Structure("spec has no layers".into()));
        }

        let mut layer_index = HashMap::new();
        for (i, l) in spec.layers.iter().enumerate() {
            if layer_index.insert(l.id.clone(), i).is_some() {
                return Err(layer_err(&l.id, "duplicate layer id"));
            }
            match l.kind {
                LayerKind::Conv | LayerKind::Dwconv => {
                    if l.kernel < 1 || l.stride < 1 {
                        return Err(layer_err(&l.id, "kernel and stride must be >= 1"));
                    }
                    if l.kernel % 2 == 0 {
                        return Err(layer_err(&l.id, "even kernels are not supported"));
                    }
                }
                _ => {
                    if l.stride != 1 {
                        return Err(layer_err(&l.id, "stride only applies to conv/dwconv"));
                    }
                }
            }
            if l.base_channels == 0 {
                return Err(layer_err(&l.id, "base_channels must be >= 1"));
            }
        }

        let mut inputs: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut outputs: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (from, to) in &spec.edges {
            let &f = layer_index
                .get(from)
                .ok_or_else(|| layer_err(from, "edge references unknown layer"))?;
            let &t = layer_index
                .get(to)
                .ok_or_else(|| layer_err(to, "edge references unknown layer"))?;
            inputs[t].push(f);
            outputs[f].push(t);
        }
        // Keep multi-input layers in spec order so add semantics are stable.
        for ins in inputs.iter_mut() {
            ins.sort_unstable();
        }

        let sources: Vec<usize> = (0..n).filter(|&i| inputs[i].is_empty()).collect();
        let sinks: Vec<usize> = (0..n).filter(|&i| outputs[i].is_empty()).collect();
        if sources.len() != 1 || sinks.len() != 1 {
            return Err(SpecError::Structure(format!(
                "expected exactly one input and one output node, found {} and {}",
                sources.len(),
                sinks.len()
            )));
        }
        let source = sources[0];
        let sink = sinks[0];
        if !matches!(spec.layers[source].kind, LayerKind::Conv | LayerKind::Fc) {
            return Err(layer_err(
                &spec.layers[source].id,
                "first layer must be conv or fc (it defines the first channel-set)",
            ));
        }

        // Kahn's algorithm, smallest spec index first: deterministic order.
        let mut indeg: Vec<usize> = inputs.iter().map(Vec::len).collect();
        let mut ready: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut topo = Vec::with_capacity(n);
        while let Some(pos) = ready.iter().enumerate().min_by_key(|(_, &v)| v).map(|(p, _)| p) {
            let i = ready.swap_remove(pos);
            topo.push(i);
            for &o in &outputs[i] {
                indeg[o] -= 1;
                if indeg[o] == 0 {
                    ready.push(o);
                }
            }
        }
        if topo.len() != n {
            let stuck = (0..n).find(|&i| indeg[i] > 0).unwrap();
            return Err(SpecError::Cycle {
                layer: spec.layers[stuck].id.clone(),
            });
        }

        // Channel-set table in first-occurrence order.
        let mut sets: Vec<ChannelSet> = Vec::new();
        let mut set_index: HashMap<String, usize> = HashMap::new();
        for l in &spec.layers {
            match set_index.get(&l.channel_set) {
                None => {
                    set_index.insert(l.channel_set.clone(), sets.len());
                    sets.push(ChannelSet {
                        id: l.channel_set.clone(),
                        base_channels: l.base_channels,
                        slimmable: l.slimmable,
                        max_channels: 0,
                        group_size: 0,
                        pathway: false,
                    });
                }
                Some(&si) => {
                    let s = &sets[si];
                    if s.base_channels != l.base_channels {
                        return Err(layer_err(
                            &l.id,
                            format!(
                                "base_channels {} disagrees with channel-set {} ({})",
                                l.base_channels, s.id, s.base_channels
                            ),
                        ));
                    }
                    if s.slimmable != l.slimmable {
                        return Err(layer_err(
                            &l.id,
                            format!("slimmable flag disagrees within channel-set {}", s.id),
                        ));
                    }
                }
            }
        }

        let b = &spec.bounds;
        if !(b.lower > 0.0 && b.lower < b.upper) {
            return Err(SpecError::Structure(format!(
                "bounds must satisfy 0 < lower < upper, got [{}, {}]",
                b.lower, b.upper
            )));
        }
        if b.groups < 2 {
            return Err(SpecError::Structure(format!(
                "groups must be >= 2, got {}",
                b.groups
            )));
        }
        for s in sets.iter_mut() {
            if s.slimmable {
                let maxc = (s.base_channels as f64 * b.upper).round() as usize;
                if maxc % b.groups != 0 {
                    let layer = spec
                        .layers
                        .iter()
                        .find(|l| l.channel_set == s.id)
                        .map(|l| l.id.clone())
                        .unwrap_or_default();
                    return Err(SpecError::IndivisibleGroups {
                        set: s.id.clone(),
                        max_channels: maxc,
                        groups: b.groups,
                        layer,
                    });
                }
                s.max_channels = maxc;
                s.group_size = maxc / b.groups;
            } else {
                s.max_channels = s.base_channels;
                s.group_size = s.base_channels;
            }
        }

        // Structural per-layer checks against the graph.
        for (i, l) in spec.layers.iter().enumerate() {
            let arity = inputs[i].len();
            match l.kind {
                LayerKind::Add => {
                    if arity != 2 {
                        return Err(layer_err(&l.id, format!("add needs 2 inputs, has {arity}")));
                    }
                    let a = &spec.layers[inputs[i][0]].channel_set;
                    let c = &spec.layers[inputs[i][1]].channel_set;
                    if a != c {
                        return Err(SpecError::AddMismatch {
                            layer: l.id.clone(),
                            a: a.clone(),
                            b: c.clone(),
                        });
                    }
                    if a != &l.channel_set {
                        return Err(layer_err(&l.id, "add output must keep its inputs' channel-set"));
                    }
                }
                _ if i == source => {}
                _ => {
                    if arity != 1 {
                        return Err(layer_err(&l.id, format!("needs 1 input, has {arity}")));
                    }
                    if l.kind.preserves_channels() {
                        let in_set = &spec.layers[inputs[i][0]].channel_set;
                        if in_set != &l.channel_set {
                            return Err(layer_err(
                                &l.id,
                                format!(
                                    "{:?} preserves channels; channel_set must equal input's ({in_set})",
                                    l.kind
                                ),
                            ));
                        }
                    }
                }
            }
        }

        // Residual ties: all members share one channel-set, which becomes a
        // pathway set (sampled first).
        for tie in &spec.residual_ties {
            let mut tie_set: Option<&String> = None;
            for id in tie {
                let &li = layer_index
                    .get(id)
                    .ok_or_else(|| layer_err(id, "residual tie references unknown layer"))?;
                let cs = &spec.layers[li].channel_set;
                match tie_set {
                    None => tie_set = Some(cs),
                    Some(prev) if prev != cs => {
                        return Err(layer_err(
                            id,
                            format!("residual tie spans channel-sets {prev} and {cs}"),
                        ))
                    }
                    _ => {}
                }
            }
            if let Some(cs) = tie_set {
                sets[set_index[cs]].pathway = true;
            }
        }

        // The classifier output dimension is task-defined and never slimmed.
        let sink_set = &spec.layers[sink].channel_set;
        let ss = &sets[set_index[sink_set]];
        if ss.slimmable {
            return Err(layer_err(
                &spec.layers[sink].id,
                "the classifier output channel-set must not be slimmable",
            ));
        }
        if ss.base_channels != spec.num_classes {
            return Err(layer_err(
                &spec.layers[sink].id,
                format!(
                    "output channels {} do not match num_classes {}",
                    ss.base_channels, spec.num_classes
                ),
            ));
        }

        Ok(Network {
            spec,
            sets,
            set_index,
            layer_index,
            inputs,
            topo,
            source,
            sink,
        })
    }

    pub fn bounds(&self) -> &WidthBounds {
        &self.spec.bounds
    }

    pub fn channel_sets(&self) -> &[ChannelSet] {
        &self.sets
    }

    pub fn channel_set(&self, id: &str) -> Option<&ChannelSet> {
        self.set_index.get(id).map(|&i| &self.sets[i])
    }

    pub fn layer(&self, id: &str) -> Option<&LayerSpec> {
        self.layer_index.get(id).map(|&i| &self.spec.layers[i])
    }

    pub fn layer_pos(&self, id: &str) -> Option<usize> {
        self.layer_index.get(id).copied()
    }

    /// Indices (into `spec.layers`) of a layer's inputs, spec order.
    pub fn layer_inputs(&self, idx: usize) -> &[usize] {
        &self.inputs[idx]
    }

    pub fn topo_order(&self) -> &[usize] {
        &self.topo
    }

    pub fn source(&self) -> usize {
        self.source
    }

    pub fn sink(&self) -> usize {
        self.sink
    }

    /// The layer whose output the loss head consumes: the input of a
    /// trailing softmax_xent node if the spec carries one, else the sink.
    pub fn logits_layer(&self) -> usize {
        let s = &self.spec.layers[self.sink];
        if s.kind == LayerKind::SoftmaxXent {
            self.inputs[self.sink][0]
        } else {
            self.sink
        }
    }

    /// Slimmable sets in sampling order: residual pathway sets first, then
    /// block-interior sets, both in first-occurrence (spec) order.
    pub fn sampling_order(&self) -> Vec<&ChannelSet> {
        let mut order: Vec<&ChannelSet> = self
            .sets
            .iter()
            .filter(|s| s.slimmable && s.pathway)
            .collect();
        order.extend(self.sets.iter().filter(|s| s.slimmable && !s.pathway));
        order
    }

    /// Active input channels of layer `idx` under `config` (the channels of
    /// its feeding set, or the raw input channels for the source layer).
    pub fn in_channels(&self, idx: usize, config: &ChannelConfig) -> usize {
        if idx == self.source {
            self.spec.input_shape.0
        } else {
            let src = self.inputs[idx][0];
            config.channels(self, &self.spec.layers[src].channel_set)
        }
    }

    /// Input channels at the maximum-width allocation (the weight store's).
    pub fn in_channels_max(&self, idx: usize) -> usize {
        if idx == self.source {
            self.spec.input_shape.0
        } else {
            let src = self.inputs[idx][0];
            self.channel_set(&self.spec.layers[src].channel_set)
                .unwrap()
                .max_channels
        }
    }

    /// Canonical JSON of the spec; hashed into checkpoints.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(&self.spec).expect("spec serializes")
    }
}

/// Every channel-set at its full group count.
pub fn max_config(net: &Network, bounds: &WidthBounds) -> ChannelConfig {
    let active_groups = net
        .sets
        .iter()
        .filter(|s| s.slimmable)
        .map(|s| (s.id.clone(), bounds.groups))
        .collect();
    ChannelConfig { active_groups }
}

/// Every channel-set at its smallest legal group count.
pub fn min_config(net: &Network, bounds: &WidthBounds) -> ChannelConfig {
    let k = bounds.k_min();
    let active_groups = net
        .sets
        .iter()
        .filter(|s| s.slimmable)
        .map(|s| (s.id.clone(), k))
        .collect();
    ChannelConfig { active_groups }
}

/// Uniform width-multiplier heuristic: one global ratio for all sets.
pub fn apply_width_multiplier(
    net: &Network,
    bounds: &WidthBounds,
    m: f64,
) -> Result<ChannelConfig, SpecError> {
    if m < bounds.lower || m > bounds.upper {
        return Err(SpecError::WidthOutOfBounds {
            m,
            lower: bounds.lower,
            upper: bounds.upper,
        });
    }
    let k_min = bounds.k_min();
    let k = ((bounds.groups as f64 * m / bounds.upper).round() as usize)
        .clamp(k_min, bounds.groups);
    let active_groups = net
        .sets
        .iter()
        .filter(|s| s.slimmable)
        .map(|s| (s.id.clone(), k))
        .collect();
    Ok(ChannelConfig { active_groups })
}

/// Uniform config at `k` active groups in every slimmable set.
pub fn uniform_config(net: &Network, k: usize) -> ChannelConfig {
    let active_groups = net
        .sets
        .iter()
        .filter(|s| s.slimmable)
        .map(|s| (s.id.clone(), k))
        .collect();
    ChannelConfig { active_groups }
}

/// One independent uniform draw per channel-set, pathway sets first.
pub fn sample_random_config(
    net: &Network,
    bounds: &WidthBounds,
    rng: &mut impl Rng,
) -> ChannelConfig {
    let k_min = bounds.k_min();
    let mut active_groups = BTreeMap::new();
    for s in net.sampling_order() {
        let k = rng.gen_range(k_min..=bounds.groups);
        active_groups.insert(s.id.clone(), k);
    }
    ChannelConfig { active_groups }
}

/// All single-group-slimmed neighbours of `config`, one per channel-set with
/// `k > k_min`, in spec order. Empty iff every set is at the floor.
pub fn slim_candidates(
    net: &Network,
    bounds: &WidthBounds,
    config: &ChannelConfig,
) -> Vec<(String, ChannelConfig)> {
    let k_min = bounds.k_min();
    let mut out = Vec::new();
    for s in net.sets.iter().filter(|s| s.slimmable) {
        let k = config
            .groups_for(&s.id)
            .expect("config covers every slimmable set");
        if k > k_min {
            let mut c = config.clone();
            c.active_groups.insert(s.id.clone(), k - 1);
            out.push((s.id.clone(), c));
        }
    }
    out
}

/// Find which sets are inconsistent with the config (used by tests and the
/// engine's entry checks).
pub fn validate_config(
    net: &Network,
    bounds: &WidthBounds,
    config: &ChannelConfig,
) -> Result<(), SpecError> {
    let k_min = bounds.k_min();
    for s in net.sets.iter().filter(|s| s.slimmable) {
        match config.groups_for(&s.id) {
            None => {
                return Err(SpecError::Structure(format!(
                    "config missing channel-set {}",
                    s.id
                )))
            }
            Some(k) if k < k_min || k > bounds.groups => {
                return Err(SpecError::Structure(format!(
                    "config k={k} outside [{k_min}, {}] for channel-set {}",
                    bounds.groups, s.id
                )))
            }
            _ => {}
        }
    }
    for id in config.active_groups.keys() {
        match net.channel_set(id) {
            None => {
                return Err(SpecError::Structure(format!(
                    "config names unknown channel-set {id}"
                )))
            }
            Some(s) if !s.slimmable => {
                return Err(SpecError::Structure(format!(
                    "config sets non-slimmable channel-set {id}"
                )))
            }
            _ => {}
        }
    }
    Ok(())
}
