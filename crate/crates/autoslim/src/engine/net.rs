//! Weight store and graph execution.
//!
//! All weights live at the maximum width (every channel-set at its upper
//! bound); a sub-network at a channel configuration reads and writes only the
//! leading-channel slices along both input and output channel axes. Slicing
//! never changes values, so a sub-network's forward pass is identical to a
//! standalone network built by copying the active slices out.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use thiserror::Error;

use super::elem::Elem;
use super::kernels::{self, BnCache, ConvDims, DwDims, FcDims, Targets, BN_EPS, BN_MOMENTUM};
use super::tensor::Tensor;
use crate::netspec::{ChannelConfig, LayerKind, Network};
use crate::resource::{self, ResourceError};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("batch shape {got:?} does not match spec input {expected:?}")]
    BatchShape {
        expected: (usize, usize, usize),
        got: Vec<usize>,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("calibration stream yielded no samples")]
    EmptyStream,
    #[error("{0}")]
    Shape(#[from] ResourceError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("non-finite loss at step {0}; lower the learning rate")]
    NonFinite(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with mini-batch statistics, update running stats (EMA).
    Train,
    /// Normalize with running statistics; no mutation.
    Eval,
    /// Normalize with mini-batch statistics while accumulating exact dataset
    /// moments of the pre-BN activations; running stats untouched until the
    /// accumulated moments are installed.
    Calibrate,
}

#[derive(Debug, Clone)]
pub struct LayerParams<E: Elem> {
    pub weight: Tensor<E>,
    pub bias: Tensor<E>,
}

#[derive(Debug, Clone)]
pub struct BnParams<E: Elem> {
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
    pub running_mean: Tensor<E>,
    pub running_var: Tensor<E>,
}

/// Weight store at maximum width. Keys are layer ids.
#[derive(Debug, Clone)]
pub struct SlimmableWeights<E: Elem = f32> {
    pub params: BTreeMap<String, LayerParams<E>>,
    pub bn: BTreeMap<String, BnParams<E>>,
}

impl<E: Elem> SlimmableWeights<E> {
    /// Fan-scaled random initialization over the maximum-width fan.
    pub fn init(net: &Network, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        let mut bn = BTreeMap::new();
        let fc_in = fc_input_features(net);
        for (i, l) in net.spec.layers.iter().enumerate() {
            let set = net.channel_set(&l.channel_set).expect("validated");
            let c_max = set.max_channels;
            match l.kind {
                LayerKind::Conv => {
                    let ci_max = net.in_channels_max(i);
                    let fan_out = (l.kernel * l.kernel * c_max) as f64;
                    let dist = Normal::new(0.0, (2.0 / fan_out).sqrt()).unwrap();
                    let shape = [c_max, ci_max, l.kernel, l.kernel];
                    let data = (0..shape.iter().product::<usize>())
                        .map(|_| E::from_f64(dist.sample(&mut rng)))
                        .collect();
                    params.insert(
                        l.id.clone(),
                        LayerParams {
                            weight: Tensor::from_vec(&shape, data),
                            bias: Tensor::zeros(&[c_max]),
                        },
                    );
                }
                LayerKind::Dwconv => {
                    let fan_out = (l.kernel * l.kernel) as f64;
                    let dist = Normal::new(0.0, (2.0 / fan_out).sqrt()).unwrap();
                    let shape = [c_max, l.kernel, l.kernel];
                    let data = (0..shape.iter().product::<usize>())
                        .map(|_| E::from_f64(dist.sample(&mut rng)))
                        .collect();
                    params.insert(
                        l.id.clone(),
                        LayerParams {
                            weight: Tensor::from_vec(&shape, data),
                            bias: Tensor::zeros(&[c_max]),
                        },
                    );
                }
                LayerKind::Fc => {
                    let i_max = fc_in[i];
                    let bound = 1.0 / (i_max as f64).sqrt();
                    let dist = Uniform::new_inclusive(-bound, bound);
                    let shape = [c_max, i_max];
                    let data = (0..c_max * i_max)
                        .map(|_| E::from_f64(dist.sample(&mut rng)))
                        .collect();
                    params.insert(
                        l.id.clone(),
                        LayerParams {
                            weight: Tensor::from_vec(&shape, data),
                            bias: Tensor::zeros(&[c_max]),
                        },
                    );
                }
                LayerKind::Bn => {
                    let mut gamma = Tensor::zeros(&[c_max]);
                    gamma.fill(E::ONE);
                    let mut rv = Tensor::zeros(&[c_max]);
                    rv.fill(E::ONE);
                    bn.insert(
                        l.id.clone(),
                        BnParams {
                            gamma,
                            beta: Tensor::zeros(&[c_max]),
                            running_mean: Tensor::zeros(&[c_max]),
                            running_var: rv,
                        },
                    );
                }
                _ => {}
            }
        }
        SlimmableWeights { params, bn }
    }

    /// Copy the active slices out into a standalone store whose allocations
    /// equal the active sizes. Running the same config on the copy must
    /// reproduce the shared-weight forward exactly.
    pub fn extract_standalone(&self, net: &Network, config: &ChannelConfig) -> Self {
        let mut params = BTreeMap::new();
        let mut bn = BTreeMap::new();
        let fc_in = fc_input_features(net);
        let fc_in_active = fc_input_features_at(net, config);
        for (i, l) in net.spec.layers.iter().enumerate() {
            let co = config.channels(net, &l.channel_set);
            match l.kind {
                LayerKind::Conv => {
                    let p = &self.params[&l.id];
                    let ci = net.in_channels(i, config);
                    let ci_max = p.weight.shape()[1];
                    let kk = l.kernel * l.kernel;
                    let mut w = Tensor::zeros(&[co, ci, l.kernel, l.kernel]);
                    for o in 0..co {
                        let src = &p.weight.data()[o * ci_max * kk..o * ci_max * kk + ci * kk];
                        w.data_mut()[o * ci * kk..(o + 1) * ci * kk].copy_from_slice(src);
                    }
                    params.insert(
                        l.id.clone(),
                        LayerParams {
                            weight: w,
                            bias: Tensor::from_vec(&[co], p.bias.data()[..co].to_vec()),
                        },
                    );
                }
                LayerKind::Dwconv => {
                    let p = &self.params[&l.id];
                    let kk = l.kernel * l.kernel;
                    params.insert(
                        l.id.clone(),
                        LayerParams {
                            weight: Tensor::from_vec(
                                &[co, l.kernel, l.kernel],
                                p.weight.data()[..co * kk].to_vec(),
                            ),
                            bias: Tensor::from_vec(&[co], p.bias.data()[..co].to_vec()),
                        },
                    );
                }
                LayerKind::Fc => {
                    let p = &self.params[&l.id];
                    let i_max = fc_in[i];
                    let i_act = fc_in_active[i];
                    debug_assert_eq!(p.weight.shape()[1], i_max);
                    let mut w = Tensor::zeros(&[co, i_act]);
                    for o in 0..co {
                        let src = &p.weight.data()[o * i_max..o * i_max + i_act];
                        w.data_mut()[o * i_act..(o + 1) * i_act].copy_from_slice(src);
                    }
                    params.insert(
                        l.id.clone(),
                        LayerParams {
                            weight: w,
                            bias: Tensor::from_vec(&[co], p.bias.data()[..co].to_vec()),
                        },
                    );
                }
                LayerKind::Bn => {
                    let b = &self.bn[&l.id];
                    bn.insert(
                        l.id.clone(),
                        BnParams {
                            gamma: Tensor::from_vec(&[co], b.gamma.data()[..co].to_vec()),
                            beta: Tensor::from_vec(&[co], b.beta.data()[..co].to_vec()),
                            running_mean: Tensor::from_vec(
                                &[co],
                                b.running_mean.data()[..co].to_vec(),
                            ),
                            running_var: Tensor::from_vec(
                                &[co],
                                b.running_var.data()[..co].to_vec(),
                            ),
                        },
                    );
                }
                _ => {}
            }
        }
        SlimmableWeights { params, bn }
    }
}

impl SlimmableWeights<f32> {
    pub fn to_f64(&self) -> SlimmableWeights<f64> {
        SlimmableWeights {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        LayerParams {
                            weight: p.weight.to_f64(),
                            bias: p.bias.to_f64(),
                        },
                    )
                })
                .collect(),
            bn: self
                .bn
                .iter()
                .map(|(k, b)| {
                    (
                        k.clone(),
                        BnParams {
                            gamma: b.gamma.to_f64(),
                            beta: b.beta.to_f64(),
                            running_mean: b.running_mean.to_f64(),
                            running_var: b.running_var.to_f64(),
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Per-fc-layer input feature capacity at maximum width (flattened C*H*W).
pub fn fc_input_features(net: &Network) -> Vec<usize> {
    let max_cfg = crate::netspec::max_config(net, net.bounds());
    fc_input_features_at(net, &max_cfg)
}

fn fc_input_features_at(net: &Network, config: &ChannelConfig) -> Vec<usize> {
    let shapes = resource::shape_inference(net, config, net.spec.input_shape)
        .expect("validated spec infers shapes");
    net.spec
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            if l.kind != LayerKind::Fc {
                return 0;
            }
            if i == net.source() {
                let (c, h, w) = net.spec.input_shape;
                c * h * w
            } else {
                let (c, h, w) = shapes[net.layer_inputs(i)[0]];
                c * h * w
            }
        })
        .collect()
}

/// Streaming per-channel moments (count / mean / M2), merged batch-by-batch.
#[derive(Debug, Clone)]
pub struct ChannelMoments {
    pub count: f64,
    pub mean: Vec<f64>,
    pub m2: Vec<f64>,
}

impl ChannelMoments {
    fn new(c: usize) -> Self {
        ChannelMoments {
            count: 0.0,
            mean: vec![0.0; c],
            m2: vec![0.0; c],
        }
    }

    /// Chan et al. parallel merge with one batch's (mean, biased var, m).
    fn merge_batch(&mut self, mean: &[f64], var: &[f64], m: usize) {
        let mb = m as f64;
        if self.count == 0.0 {
            self.mean.copy_from_slice(mean);
            for (dst, &v) in self.m2.iter_mut().zip(var) {
                *dst = v * mb;
            }
            self.count = mb;
            return;
        }
        let total = self.count + mb;
        for ch in 0..self.mean.len() {
            let delta = mean[ch] - self.mean[ch];
            self.mean[ch] += delta * mb / total;
            self.m2[ch] += var[ch] * mb + delta * delta * self.count * mb / total;
        }
        self.count = total;
    }
}

/// Accumulated calibration moments per BN layer (indexed like spec.layers).
pub struct CalibState {
    moments: Vec<Option<ChannelMoments>>,
}

impl CalibState {
    pub fn new(net: &Network) -> Self {
        CalibState {
            moments: vec![None; net.spec.layers.len()],
        }
    }
}

enum BnCtx<'a> {
    Train {
        updates: &'a mut Vec<(usize, Vec<f64>, Vec<f64>, usize)>,
    },
    Eval,
    Calibrate {
        state: &'a mut CalibState,
    },
}

/// Everything the backward pass needs from a forward pass.
pub struct ForwardTrace<E: Elem> {
    pub outs: Vec<Option<Tensor<E>>>,
    pub bn_caches: Vec<Option<BnCache>>,
    pub shapes: Vec<(usize, usize, usize)>,
}

impl<E: Elem> ForwardTrace<E> {
    pub fn logits(&self, net: &Network) -> &Tensor<E> {
        self.outs[net.logits_layer()]
            .as_ref()
            .expect("logits retained")
    }
}

fn check_batch<E: Elem>(net: &Network, batch: &Tensor<E>) -> Result<usize, EngineError> {
    let s = batch.shape();
    let (c, h, w) = net.spec.input_shape;
    if s.len() != 4 || s[1] != c || s[2] != h || s[3] != w {
        return Err(EngineError::BatchShape {
            expected: (c, h, w),
            got: s.to_vec(),
        });
    }
    Ok(s[0])
}

/// Core graph walk. `keep_all` retains every activation (needed for
/// backward); otherwise buffers are freed as soon as all consumers ran.
fn run_forward<E: Elem>(
    net: &Network,
    weights: &SlimmableWeights<E>,
    config: &ChannelConfig,
    batch: &Tensor<E>,
    bn_ctx: &mut BnCtx<'_>,
    keep_all: bool,
) -> Result<ForwardTrace<E>, EngineError> {
    let n = check_batch(net, batch)?;
    crate::netspec::validate_config(net, net.bounds(), config)
        .map_err(|e| EngineError::Config(e.to_string()))?;
    let shapes = resource::shape_inference(net, config, net.spec.input_shape)?;
    let layers = &net.spec.layers;
    let mut outs: Vec<Option<Tensor<E>>> = vec![None; layers.len()];
    let mut bn_caches: Vec<Option<BnCache>> = vec![None; layers.len()];

    // Consumer counts for eager freeing in inference-only walks.
    let mut pending: Vec<usize> = vec![0; layers.len()];
    for i in 0..layers.len() {
        for &src in net.layer_inputs(i) {
            pending[src] += 1;
        }
    }
    let logits_idx = net.logits_layer();

    for &i in net.topo_order() {
        let l = &layers[i];
        let (co, ho, wo) = shapes[i];
        let in_shape = if i == net.source() {
            net.spec.input_shape
        } else {
            shapes[net.layer_inputs(i)[0]]
        };
        let x: &Tensor<E> = if i == net.source() {
            batch
        } else {
            outs[net.layer_inputs(i)[0]].as_ref().expect("topo order")
        };
        let out = match l.kind {
            LayerKind::Conv => {
                let p = &weights.params[&l.id];
                let d = ConvDims {
                    ci: in_shape.0,
                    co,
                    ci_max: p.weight.shape()[1],
                    k: l.kernel,
                    stride: l.stride,
                    h: in_shape.1,
                    w: in_shape.2,
                    ho,
                    wo,
                };
                let mut o = Tensor::zeros(&[n, co, ho, wo]);
                kernels::conv_forward(x, p.weight.data(), p.bias.data(), &d, &mut o);
                o
            }
            LayerKind::Dwconv => {
                let p = &weights.params[&l.id];
                let d = DwDims {
                    c: co,
                    k: l.kernel,
                    stride: l.stride,
                    h: in_shape.1,
                    w: in_shape.2,
                    ho,
                    wo,
                };
                let mut o = Tensor::zeros(&[n, co, ho, wo]);
                kernels::dwconv_forward(x, p.weight.data(), p.bias.data(), &d, &mut o);
                o
            }
            LayerKind::Fc => {
                let p = &weights.params[&l.id];
                let d = FcDims {
                    i: in_shape.0 * in_shape.1 * in_shape.2,
                    o: co,
                    i_max: p.weight.shape()[1],
                };
                let mut o = Tensor::zeros(&[n, co, 1, 1]);
                kernels::fc_forward(x, p.weight.data(), p.bias.data(), &d, &mut o);
                o
            }
            LayerKind::Relu => {
                let mut o = Tensor::zeros(x.shape());
                kernels::relu_forward(x, &mut o);
                o
            }
            LayerKind::AvgpoolGlobal => {
                let mut o = Tensor::zeros(&[n, co, 1, 1]);
                kernels::gap_forward(x, in_shape.0, in_shape.1 * in_shape.2, &mut o);
                o
            }
            LayerKind::Add => {
                let ins = net.layer_inputs(i);
                let a = outs[ins[0]].as_ref().expect("topo order");
                let b = outs[ins[1]].as_ref().expect("topo order");
                let mut o = Tensor::zeros(a.shape());
                kernels::add_forward(a, b, &mut o);
                o
            }
            LayerKind::SoftmaxXent => {
                // Loss head: identity on logits here; losses are computed by
                // the caller from the logits layer.
                x.clone()
            }
            LayerKind::Bn => {
                let b = &weights.bn[&l.id];
                let hw = ho * wo;
                let mut o = Tensor::zeros(x.shape());
                match bn_ctx {
                    BnCtx::Eval => {
                        let mean: Vec<f64> =
                            b.running_mean.data()[..co].iter().map(|v| v.to_f64()).collect();
                        let inv_std: Vec<f64> = b.running_var.data()[..co]
                            .iter()
                            .map(|v| 1.0 / (v.to_f64() + BN_EPS).sqrt())
                            .collect();
                        kernels::bn_apply(
                            x,
                            co,
                            hw,
                            &mean,
                            &inv_std,
                            &b.gamma.data()[..co],
                            &b.beta.data()[..co],
                            &mut o,
                        );
                    }
                    BnCtx::Train { updates } => {
                        let (mean, var, m) = kernels::batch_moments(x, co, hw);
                        let inv_std: Vec<f64> =
                            var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                        kernels::bn_apply(
                            x,
                            co,
                            hw,
                            &mean,
                            &inv_std,
                            &b.gamma.data()[..co],
                            &b.beta.data()[..co],
                            &mut o,
                        );
                        bn_caches[i] = Some(BnCache {
                            mean: mean.clone(),
                            inv_std,
                        });
                        updates.push((i, mean, var, m));
                    }
                    BnCtx::Calibrate { state } => {
                        let (mean, var, m) = kernels::batch_moments(x, co, hw);
                        let inv_std: Vec<f64> =
                            var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                        kernels::bn_apply(
                            x,
                            co,
                            hw,
                            &mean,
                            &inv_std,
                            &b.gamma.data()[..co],
                            &b.beta.data()[..co],
                            &mut o,
                        );
                        let slot = &mut state.moments[i];
                        if slot.is_none() {
                            *slot = Some(ChannelMoments::new(co));
                        }
                        slot.as_mut().unwrap().merge_batch(&mean, &var, m);
                    }
                }
                o
            }
        };
        outs[i] = Some(out);
        if !keep_all {
            for &src in net.layer_inputs(i) {
                pending[src] -= 1;
                if pending[src] == 0 && src != logits_idx {
                    outs[src] = None;
                }
            }
        }
    }
    Ok(ForwardTrace {
        outs,
        bn_caches,
        shapes,
    })
}

fn apply_bn_updates<E: Elem>(
    net: &Network,
    weights: &mut SlimmableWeights<E>,
    updates: Vec<(usize, Vec<f64>, Vec<f64>, usize)>,
) {
    for (i, mean, var, m) in updates {
        let id = &net.spec.layers[i].id;
        let b = weights.bn.get_mut(id).expect("bn layer has state");
        let unbias = if m > 1 { m as f64 / (m as f64 - 1.0) } else { 1.0 };
        for (ch, (&mu, &v)) in mean.iter().zip(&var).enumerate() {
            let rm = b.running_mean.data_mut();
            rm[ch] = E::from_f64(rm[ch].to_f64() * (1.0 - BN_MOMENTUM) + mu * BN_MOMENTUM);
            let rv = b.running_var.data_mut();
            rv[ch] = E::from_f64(rv[ch].to_f64() * (1.0 - BN_MOMENTUM) + v * unbias * BN_MOMENTUM);
        }
    }
}

/// Inference-mode forward; BN uses running statistics, nothing is mutated,
/// intermediate activations are freed eagerly. Returns logits [n, classes].
pub fn forward_eval<E: Elem>(
    net: &Network,
    weights: &SlimmableWeights<E>,
    config: &ChannelConfig,
    batch: &Tensor<E>,
) -> Result<Tensor<E>, EngineError> {
    let mut ctx = BnCtx::Eval;
    let mut trace = run_forward(net, weights, config, batch, &mut ctx, false)?;
    Ok(trace.outs[net.logits_layer()].take().expect("logits retained"))
}

/// Train-mode forward retaining activations; BN running stats are updated.
pub fn forward_train<E: Elem>(
    net: &Network,
    weights: &mut SlimmableWeights<E>,
    config: &ChannelConfig,
    batch: &Tensor<E>,
) -> Result<ForwardTrace<E>, EngineError> {
    let mut updates = Vec::new();
    let trace = {
        let mut ctx = BnCtx::Train {
            updates: &mut updates,
        };
        run_forward(net, weights, config, batch, &mut ctx, true)?
    };
    apply_bn_updates(net, weights, updates);
    Ok(trace)
}

/// Calibration forward: batch-stat normalization (identical activations to
/// train mode) while exact dataset moments accumulate in `state`.
pub fn forward_calibrate<E: Elem>(
    net: &Network,
    weights: &SlimmableWeights<E>,
    config: &ChannelConfig,
    batch: &Tensor<E>,
    state: &mut CalibState,
) -> Result<(), EngineError> {
    let mut ctx = BnCtx::Calibrate { state };
    run_forward(net, weights, config, batch, &mut ctx, false)?;
    Ok(())
}

/// Loss of a train-mode forward (batch-statistic BN) without mutating the
/// store: the scalar function finite-difference checks differentiate.
pub fn forward_loss<E: Elem>(
    net: &Network,
    weights: &SlimmableWeights<E>,
    config: &ChannelConfig,
    batch: &Tensor<E>,
    targets: &Targets<'_, E>,
) -> Result<f64, EngineError> {
    let mut updates = Vec::new();
    let trace = {
        let mut ctx = BnCtx::Train {
            updates: &mut updates,
        };
        run_forward(net, weights, config, batch, &mut ctx, true)?
    };
    let n = batch.shape()[0];
    let classes = net.spec.num_classes;
    let logits_full = trace.outs[net.logits_layer()].as_ref().expect("kept");
    let logits = Tensor::from_vec(&[n, classes], logits_full.data().to_vec());
    let (loss, _) = kernels::softmax_xent(&logits, classes, targets);
    Ok(loss)
}

/// Gradient buffers mirroring a weight store; allocated at maximum width so
/// inactive slices stay exactly zero.
#[derive(Debug, Clone)]
pub struct GradStore<E: Elem> {
    pub params: BTreeMap<String, LayerParams<E>>,
    pub bn: BTreeMap<String, (Tensor<E>, Tensor<E>)>,
}

impl<E: Elem> GradStore<E> {
    pub fn zeros_like(w: &SlimmableWeights<E>) -> Self {
        GradStore {
            params: w
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        LayerParams {
                            weight: Tensor::zeros(p.weight.shape()),
                            bias: Tensor::zeros(p.bias.shape()),
                        },
                    )
                })
                .collect(),
            bn: w
                .bn
                .iter()
                .map(|(k, b)| {
                    (
                        k.clone(),
                        (Tensor::zeros(b.gamma.shape()), Tensor::zeros(b.beta.shape())),
                    )
                })
                .collect(),
        }
    }

    pub fn reset(&mut self) {
        for p in self.params.values_mut() {
            p.weight.fill(E::ZERO);
            p.bias.fill(E::ZERO);
        }
        for (g, b) in self.bn.values_mut() {
            g.fill(E::ZERO);
            b.fill(E::ZERO);
        }
    }
}

pub struct BackwardOut<E: Elem> {
    pub loss: f64,
    /// Logits of this pass, [n, classes]; detached by construction.
    pub logits: Tensor<E>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    HardXent,
    SoftXent,
}

/// Forward (train-mode BN) + loss + reverse-mode gradients, accumulated into
/// `grads`. Gradients exist only on active slices.
pub fn backward<E: Elem>(
    net: &Network,
    weights: &mut SlimmableWeights<E>,
    config: &ChannelConfig,
    batch: &Tensor<E>,
    targets: &Targets<'_, E>,
    grads: &mut GradStore<E>,
) -> Result<BackwardOut<E>, EngineError> {
    let trace = forward_train(net, weights, config, batch)?;
    backward_from_trace(net, weights, config, batch, &trace, targets, grads)
}

pub fn backward_from_trace<E: Elem>(
    net: &Network,
    weights: &SlimmableWeights<E>,
    // Slice geometry comes from the trace's shapes; the config parameter
    // stays for symmetry with `backward`.
    _config: &ChannelConfig,
    batch: &Tensor<E>,
    trace: &ForwardTrace<E>,
    targets: &Targets<'_, E>,
    grads: &mut GradStore<E>,
) -> Result<BackwardOut<E>, EngineError> {
    let n = batch.shape()[0];
    let layers = &net.spec.layers;
    let logits_idx = net.logits_layer();
    let classes = net.spec.num_classes;
    let logits_full = trace.outs[logits_idx].as_ref().expect("kept");
    let logits = Tensor::from_vec(&[n, classes], logits_full.data().to_vec());
    let (loss, dlogits) = kernels::softmax_xent(&logits, classes, targets);

    let mut douts: Vec<Option<Tensor<E>>> = vec![None; layers.len()];
    douts[logits_idx] = Some(Tensor::from_vec(
        logits_full.shape(),
        dlogits.data().to_vec(),
    ));

    for &i in net.topo_order().iter().rev() {
        let Some(dout) = douts[i].take() else { continue };
        let l = &layers[i];
        let in_shape = if i == net.source() {
            net.spec.input_shape
        } else {
            trace.shapes[net.layer_inputs(i)[0]]
        };
        let x: &Tensor<E> = if i == net.source() {
            batch
        } else {
            trace.outs[net.layer_inputs(i)[0]].as_ref().expect("kept")
        };
        let (co, ho, wo) = trace.shapes[i];

        // Gradient buffer for the (single) upstream input; add and the loss
        // head route gradients differently and skip it.
        let needs_dx =
            i != net.source() && !matches!(l.kind, LayerKind::Add | LayerKind::SoftmaxXent);
        let mut dx: Option<Tensor<E>> = if needs_dx {
            Some(Tensor::zeros(&[n, in_shape.0, in_shape.1, in_shape.2]))
        } else {
            None
        };

        match l.kind {
            LayerKind::Conv => {
                let p = &weights.params[&l.id];
                let g = grads.params.get_mut(&l.id).expect("grad buffers");
                let d = ConvDims {
                    ci: in_shape.0,
                    co,
                    ci_max: p.weight.shape()[1],
                    k: l.kernel,
                    stride: l.stride,
                    h: in_shape.1,
                    w: in_shape.2,
                    ho,
                    wo,
                };
                let mut sink = Tensor::zeros(&[n, in_shape.0, in_shape.1, in_shape.2]);
                let dxr = dx.as_mut().unwrap_or(&mut sink);
                kernels::conv_backward(
                    x,
                    p.weight.data(),
                    &dout,
                    &d,
                    dxr,
                    g.weight.data_mut(),
                    g.bias.data_mut(),
                );
            }
            LayerKind::Dwconv => {
                let p = &weights.params[&l.id];
                let g = grads.params.get_mut(&l.id).expect("grad buffers");
                let d = DwDims {
                    c: co,
                    k: l.kernel,
                    stride: l.stride,
                    h: in_shape.1,
                    w: in_shape.2,
                    ho,
                    wo,
                };
                let mut sink = Tensor::zeros(&[n, in_shape.0, in_shape.1, in_shape.2]);
                let dxr = dx.as_mut().unwrap_or(&mut sink);
                kernels::dwconv_backward(
                    x,
                    p.weight.data(),
                    &dout,
                    &d,
                    dxr,
                    g.weight.data_mut(),
                    g.bias.data_mut(),
                );
            }
            LayerKind::Fc => {
                let p = &weights.params[&l.id];
                let g = grads.params.get_mut(&l.id).expect("grad buffers");
                let d = FcDims {
                    i: in_shape.0 * in_shape.1 * in_shape.2,
                    o: co,
                    i_max: p.weight.shape()[1],
                };
                let mut sink = Tensor::zeros(&[n, in_shape.0, in_shape.1, in_shape.2]);
                let dxr = dx.as_mut().unwrap_or(&mut sink);
                kernels::fc_backward(
                    x,
                    p.weight.data(),
                    &dout,
                    &d,
                    dxr,
                    g.weight.data_mut(),
                    g.bias.data_mut(),
                );
            }
            LayerKind::Relu => {
                if let Some(dxr) = dx.as_mut() {
                    kernels::relu_backward(x, &dout, dxr);
                }
            }
            LayerKind::AvgpoolGlobal => {
                if let Some(dxr) = dx.as_mut() {
                    kernels::gap_backward(&dout, in_shape.0, in_shape.1 * in_shape.2, dxr);
                }
            }
            LayerKind::Bn => {
                let b = &weights.bn[&l.id];
                let (dgamma, dbeta) = grads.bn.get_mut(&l.id).expect("grad buffers");
                let cache = trace.bn_caches[i].as_ref().expect("train forward cached");
                if let Some(dxr) = dx.as_mut() {
                    kernels::bn_backward(
                        x,
                        co,
                        ho * wo,
                        cache,
                        &b.gamma.data()[..co],
                        &dout,
                        dxr,
                        &mut dgamma.data_mut()[..co],
                        &mut dbeta.data_mut()[..co],
                    );
                }
            }
            LayerKind::Add => {
                // Both inputs receive the output gradient unchanged.
                let ins = net.layer_inputs(i);
                for &src in ins {
                    accumulate(&mut douts[src], &dout);
                }
            }
            LayerKind::SoftmaxXent => {
                // Identity in the graph; loss gradients enter at the logits
                // layer directly, so nothing propagates from here.
            }
        }
        if let Some(dxv) = dx {
            let src = net.layer_inputs(i)[0];
            accumulate_owned(&mut douts[src], dxv);
        }
    }

    Ok(BackwardOut { loss, logits })
}

fn accumulate<E: Elem>(slot: &mut Option<Tensor<E>>, g: &Tensor<E>) {
    match slot {
        None => *slot = Some(g.clone()),
        Some(t) => {
            for (a, &b) in t.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
}

fn accumulate_owned<E: Elem>(slot: &mut Option<Tensor<E>>, g: Tensor<E>) {
    match slot {
        None => *slot = Some(g),
        Some(t) => {
            for (a, &b) in t.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
}

/// Replace the running statistics of every BN layer's active slice with the
/// exact dataset moments of its pre-BN activations over the stream.
pub fn recalibrate_bn<E: Elem>(
    net: &Network,
    weights: &mut SlimmableWeights<E>,
    config: &ChannelConfig,
    stream: impl Iterator<Item = Tensor<E>>,
) -> Result<usize, EngineError> {
    let mut state = CalibState::new(net);
    let mut samples = 0usize;
    for batch in stream {
        samples += batch.shape()[0];
        forward_calibrate(net, weights, config, &batch, &mut state)?;
    }
    if samples == 0 {
        return Err(EngineError::EmptyStream);
    }
    for (i, m) in state.moments.iter().enumerate() {
        let Some(m) = m else { continue };
        let id = &net.spec.layers[i].id;
        let b = weights.bn.get_mut(id).expect("bn layer has state");
        for ch in 0..m.mean.len() {
            b.running_mean.data_mut()[ch] = E::from_f64(m.mean[ch]);
            b.running_var.data_mut()[ch] = E::from_f64(m.m2[ch] / m.count);
        }
    }
    Ok(samples)
}

/// Top-1 accuracy over a dataset, evaluated in eval mode in fixed-size
/// chunks (per-sample semantics, so chunking does not change results).
pub fn accuracy<E: Elem>(
    net: &Network,
    weights: &SlimmableWeights<E>,
    config: &ChannelConfig,
    images: &Tensor<E>,
    labels: &[usize],
    chunk: usize,
) -> Result<f64, EngineError> {
    let n = images.shape()[0];
    assert_eq!(n, labels.len());
    let (c, h, w) = net.spec.input_shape;
    let sample = c * h * w;
    let classes = net.spec.num_classes;
    let mut correct = 0.0f64;
    let mut done = 0usize;
    while done < n {
        let take = chunk.min(n - done);
        let batch = Tensor::from_vec(
            &[take, c, h, w],
            images.data()[done * sample..(done + take) * sample].to_vec(),
        );
        let logits = forward_eval(net, weights, config, &batch)?;
        correct += kernels::top1_accuracy(&logits, classes, &labels[done..done + take]) * take as f64;
        done += take;
    }
    Ok(correct / n as f64)
}
