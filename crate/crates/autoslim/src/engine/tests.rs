//! Engine oracles: finite-difference gradients, slice consistency against
//! copied standalone weights, recalibration moments, determinism.

use super::*;
use crate::netspec::{max_config, parse_spec, sample_random_config, uniform_config, Network};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Toy spec covering every layer kind: two convs with a residual add on one
/// channel-set, bn, relu, dwconv, global pool, fc head.
pub(crate) fn all_kinds_doc() -> &'static str {
    r#"{
        "input_shape": [2, 6, 6],
        "num_classes": 3,
        "bounds": {"lower": 0.25, "upper": 1.5, "groups": 3},
        "layers": [
            {"id": "c1", "kind": "conv", "kernel": 3, "stride": 2, "base_channels": 8, "channel_set": "a"},
            {"id": "n1", "kind": "bn", "base_channels": 8, "channel_set": "a"},
            {"id": "r1", "kind": "relu", "base_channels": 8, "channel_set": "a"},
            {"id": "c2", "kind": "conv", "kernel": 1, "stride": 1, "base_channels": 8, "channel_set": "a"},
            {"id": "s1", "kind": "add", "base_channels": 8, "channel_set": "a"},
            {"id": "d1", "kind": "dwconv", "kernel": 3, "stride": 1, "base_channels": 8, "channel_set": "a"},
            {"id": "gap", "kind": "avgpool_global", "base_channels": 8, "channel_set": "a"},
            {"id": "fc", "kind": "fc", "base_channels": 3, "slimmable": false, "channel_set": "out"}
        ],
        "edges": [
            ["c1", "n1"], ["n1", "r1"], ["r1", "c2"],
            ["r1", "s1"], ["c2", "s1"],
            ["s1", "d1"], ["d1", "gap"], ["gap", "fc"]
        ],
        "residual_ties": [["c1", "c2", "s1"]]
    }"#
}

fn toy_net() -> Network {
    parse_spec(all_kinds_doc()).unwrap()
}

fn random_batch(net: &Network, n: usize, seed: u64) -> (Tensor<f64>, Vec<usize>) {
    let (c, h, w) = net.spec.input_shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let labels = (0..n).map(|_| rng.gen_range(0..net.spec.num_classes)).collect();
    (Tensor::from_vec(&[n, c, h, w], data), labels)
}

/// rtol 1e-4 with an absolute floor of 1e-5: central differences at
/// eps=1e-3 carry O(eps^2) truncation noise, so pure relative error is
/// meaningless for gradients that are themselves near zero.
fn grad_close(fd: f64, analytic: f64) -> bool {
    (fd - analytic).abs() <= 1e-5 + 1e-4 * fd.abs().max(analytic.abs())
}

/// Central finite differences against analytic gradients for every stored
/// parameter; run in f64 so the comparison isolates the backprop math.
fn check_gradients(net: &Network, config: &crate::netspec::ChannelConfig, soft: bool) {
    let weights = SlimmableWeights::<f64>::init(net, 11);
    let (batch, labels) = random_batch(net, 4, 21);
    let soft_targets = {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let c = net.spec.num_classes;
        let mut t = Tensor::<f64>::zeros(&[4, c]);
        for i in 0..4 {
            let row = &mut t.data_mut()[i * c..(i + 1) * c];
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = rng.gen_range(0.05..1.0);
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        t
    };

    let mut work = weights.clone();
    let mut grads = GradStore::zeros_like(&work);
    {
        let targets = if soft {
            Targets::Soft(&soft_targets)
        } else {
            Targets::Hard(&labels)
        };
        backward(net, &mut work, config, &batch, &targets, &mut grads).unwrap();
    }

    let mut checked = 0usize;
    let mut kinked = 0usize;
    let mut check_tensor = |name: &str, get: &mut dyn FnMut(&mut SlimmableWeights<f64>) -> &mut [f64],
                            g: &[f64], active: &dyn Fn(usize) -> bool| {
        let mut stencil = |j: usize, eps: f64| {
            let mut probe = weights.clone();
            let orig = get(&mut probe)[j];
            get(&mut probe)[j] = orig + eps;
            let targets = if soft {
                Targets::Soft(&soft_targets)
            } else {
                Targets::Hard(&labels)
            };
            let lp = forward_loss(net, &probe, config, &batch, &targets).unwrap();
            get(&mut probe)[j] = orig - eps;
            let lm = forward_loss(net, &probe, config, &batch, &targets).unwrap();
            (lp - lm) / (2.0 * eps)
        };
        for j in 0..g.len() {
            if !active(j) {
                assert_eq!(g[j], 0.0, "{name}[{j}]: inactive slice must have zero gradient");
                continue;
            }
            let fd = stencil(j, 1e-3);
            if !grad_close(fd, g[j]) {
                // A coarse stencil can straddle a relu kink, where central
                // differences are invalid. Refine: a genuinely wrong gradient
                // also fails the tighter check, a kink artifact does not.
                let fd2 = stencil(j, 1e-4);
                assert!(
                    (fd2 - g[j]).abs() <= 1e-7 + 1e-4 * fd2.abs().max(g[j].abs()),
                    "{name}[{j}]: fd(1e-3)={fd:.8e} fd(1e-4)={fd2:.8e} analytic={:.8e}",
                    g[j]
                );
                kinked += 1;
            }
            checked += 1;
        }
    };

    // Active slice geometry per tensor.
    for (i, l) in net.spec.layers.iter().enumerate().collect::<Vec<_>>() {
        let id = l.id.clone();
        match l.kind {
            crate::netspec::LayerKind::Conv => {
                let co_max = net.channel_set(&l.channel_set).unwrap().max_channels;
                let ci_max = net.in_channels_max(i);
                let co = config.channels(net, &l.channel_set);
                let ci = net.in_channels(i, config);
                let kk = l.kernel * l.kernel;
                let g = grads.params[&id].weight.data().to_vec();
                let idc = id.clone();
                check_tensor(
                    &format!("{id}.weight"),
                    &mut |w| w.params.get_mut(&idc).unwrap().weight.data_mut(),
                    &g,
                    &|j| {
                        let o = j / (ci_max * kk);
                        let c = (j % (ci_max * kk)) / kk;
                        o < co && c < ci
                    },
                );
                let gb = grads.params[&id].bias.data().to_vec();
                let idb = id.clone();
                check_tensor(
                    &format!("{id}.bias"),
                    &mut |w| w.params.get_mut(&idb).unwrap().bias.data_mut(),
                    &gb,
                    &|j| j < co,
                );
                let _ = co_max;
            }
            crate::netspec::LayerKind::Dwconv => {
                let co = config.channels(net, &l.channel_set);
                let kk = l.kernel * l.kernel;
                let g = grads.params[&id].weight.data().to_vec();
                let idc = id.clone();
                check_tensor(
                    &format!("{id}.weight"),
                    &mut |w| w.params.get_mut(&idc).unwrap().weight.data_mut(),
                    &g,
                    &|j| j / kk < co,
                );
                let gb = grads.params[&id].bias.data().to_vec();
                let idb = id.clone();
                check_tensor(
                    &format!("{id}.bias"),
                    &mut |w| w.params.get_mut(&idb).unwrap().bias.data_mut(),
                    &gb,
                    &|j| j < co,
                );
            }
            crate::netspec::LayerKind::Fc => {
                let co = config.channels(net, &l.channel_set);
                let i_max = super::net::fc_input_features(net)[i];
                let shapes =
                    crate::resource::shape_inference(net, config, net.spec.input_shape).unwrap();
                let (ic, ih, iw) = shapes[net.layer_inputs(i)[0]];
                let i_act = ic * ih * iw;
                let g = grads.params[&id].weight.data().to_vec();
                let idc = id.clone();
                check_tensor(
                    &format!("{id}.weight"),
                    &mut |w| w.params.get_mut(&idc).unwrap().weight.data_mut(),
                    &g,
                    &|j| j / i_max < co && j % i_max < i_act,
                );
                let gb = grads.params[&id].bias.data().to_vec();
                let idb = id.clone();
                check_tensor(
                    &format!("{id}.bias"),
                    &mut |w| w.params.get_mut(&idb).unwrap().bias.data_mut(),
                    &gb,
                    &|j| j < co,
                );
            }
            crate::netspec::LayerKind::Bn => {
                let co = config.channels(net, &l.channel_set);
                let (gg, gb) = (&grads.bn[&id].0, &grads.bn[&id].1);
                let ggv = gg.data().to_vec();
                let idg = id.clone();
                check_tensor(
                    &format!("{id}.gamma"),
                    &mut |w| w.bn.get_mut(&idg).unwrap().gamma.data_mut(),
                    &ggv,
                    &|j| j < co,
                );
                let gbv = gb.data().to_vec();
                let idb = id.clone();
                check_tensor(
                    &format!("{id}.beta"),
                    &mut |w| w.bn.get_mut(&idb).unwrap().beta.data_mut(),
                    &gbv,
                    &|j| j < co,
                );
            }
            _ => {}
        }
    }
    assert!(checked > 100, "gradient check exercised too few parameters");
    assert!(
        kinked * 10 < checked,
        "{kinked}/{checked} parameters needed the kink fallback; that is not a stencil artifact"
    );
}

#[test]
fn finite_difference_hard_loss_max_width() {
    let net = toy_net();
    let cfg = max_config(&net, net.bounds());
    check_gradients(&net, &cfg, false);
}

#[test]
fn finite_difference_soft_loss_sliced_width() {
    let net = toy_net();
    let cfg = uniform_config(&net, 2);
    check_gradients(&net, &cfg, true);
}

#[test]
fn finite_difference_hard_loss_sliced_width() {
    let net = toy_net();
    let cfg = uniform_config(&net, 2);
    check_gradients(&net, &cfg, false);
}

#[test]
fn slice_consistency_shared_vs_standalone() {
    let net = toy_net();
    let weights = SlimmableWeights::<f32>::init(&net, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (c, h, w) = net.spec.input_shape;
    let n = 3;
    for trial in 0..20 {
        let cfg = sample_random_config(&net, net.bounds(), &mut rng);
        let data: Vec<f32> = (0..n * c * h * w).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let batch = Tensor::from_vec(&[n, c, h, w], data);
        let shared = forward_eval(&net, &weights, &cfg, &batch).unwrap();
        let standalone_w = weights.extract_standalone(&net, &cfg);
        let standalone = forward_eval(&net, &standalone_w, &cfg, &batch).unwrap();
        for (a, b) in shared.data().iter().zip(standalone.data()) {
            let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-3);
            assert!(rel < 1e-6, "trial {trial}: {a} vs {b}");
        }
    }
}

#[test]
fn soft_xent_with_onehot_matches_hard_gradients() {
    let net = toy_net();
    let cfg = max_config(&net, net.bounds());
    let weights = SlimmableWeights::<f64>::init(&net, 13);
    let (batch, labels) = random_batch(&net, 4, 17);
    let c = net.spec.num_classes;
    let mut onehot = Tensor::<f64>::zeros(&[4, c]);
    for (i, &y) in labels.iter().enumerate() {
        onehot.data_mut()[i * c + y] = 1.0;
    }
    let mut w1 = weights.clone();
    let mut g1 = GradStore::zeros_like(&w1);
    let o1 = backward(&net, &mut w1, &cfg, &batch, &Targets::Hard(&labels), &mut g1).unwrap();
    let mut w2 = weights.clone();
    let mut g2 = GradStore::zeros_like(&w2);
    let o2 = backward(&net, &mut w2, &cfg, &batch, &Targets::Soft(&onehot), &mut g2).unwrap();
    assert!((o1.loss - o2.loss).abs() < 1e-12);
    for (id, p) in &g1.params {
        for (a, b) in p.weight.data().iter().zip(g2.params[id].weight.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn training_is_bitwise_deterministic() {
    let net = toy_net();
    let cfg = max_config(&net, net.bounds());
    let run = || {
        let mut w = SlimmableWeights::<f32>::init(&net, 9);
        let mut st = SgdState::zeros_like(&w);
        let mut grads = GradStore::zeros_like(&w);
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..10 {
            let (c, h, wd) = net.spec.input_shape;
            let data: Vec<f32> = (0..4 * c * h * wd).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..net.spec.num_classes)).collect();
            let batch = Tensor::from_vec(&[4, c, h, wd], data);
            grads.reset();
            backward(&net, &mut w, &cfg, &batch, &Targets::Hard(&labels), &mut grads).unwrap();
            sgd_step(
                &mut w,
                &grads,
                &mut st,
                &SgdHyper {
                    lr: 0.05,
                    momentum: 0.9,
                    weight_decay: 1e-4,
                },
            );
        }
        w
    };
    let w1 = run();
    let w2 = run();
    for (id, p) in &w1.params {
        assert_eq!(p.weight.data(), w2.params[id].weight.data(), "{id} diverged");
    }
}

/// Spec with a single bn behind an identity-capable 1x1 conv; the analytic
/// recalibration oracle runs through it.
fn calib_net() -> Network {
    parse_spec(
        r#"{
        "input_shape": [4, 1, 1],
        "num_classes": 2,
        "bounds": {"lower": 0.25, "upper": 1.0, "groups": 4},
        "layers": [
            {"id": "c1", "kind": "conv", "kernel": 1, "stride": 1, "base_channels": 4, "channel_set": "a"},
            {"id": "n1", "kind": "bn", "base_channels": 4, "channel_set": "a"},
            {"id": "fc", "kind": "fc", "base_channels": 2, "slimmable": false, "channel_set": "out"}
        ],
        "edges": [["c1", "n1"], ["n1", "fc"]]
    }"#,
    )
    .unwrap()
}

fn identity_conv(w: &mut SlimmableWeights<f32>) {
    let p = w.params.get_mut("c1").unwrap();
    p.weight.fill(0.0);
    let side = 4;
    for i in 0..side {
        p.weight.data_mut()[i * side + i] = 1.0;
    }
    p.bias.fill(0.0);
}

#[test]
fn recalibration_constant_stream_gives_zero_variance() {
    let net = calib_net();
    let mut w = SlimmableWeights::<f32>::init(&net, 1);
    identity_conv(&mut w);
    let cfg = max_config(&net, net.bounds());
    let batch = Tensor::from_vec(&[8, 4, 1, 1], vec![0.5f32; 32]);
    let stream = (0..4).map(move |_| batch.clone());
    recalibrate_bn(&net, &mut w, &cfg, stream).unwrap();
    let bn = &w.bn["n1"];
    for ch in 0..4 {
        assert!((bn.running_mean.data()[ch] - 0.5).abs() < 1e-6);
        assert!(bn.running_var.data()[ch].abs() < 1e-9);
    }
}

#[test]
fn recalibration_recovers_known_moments() {
    let net = calib_net();
    let mut w = SlimmableWeights::<f32>::init(&net, 1);
    identity_conv(&mut w);
    let cfg = max_config(&net, net.bounds());
    // Per-channel N(mu_c, sigma_c^2); 4096 samples in 16 batches.
    let mus = [0.0f64, 1.0, -2.0, 0.3];
    let sigmas = [1.0f64, 0.5, 2.0, 0.1];
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut batches = Vec::new();
    let mut sums = [0.0f64; 4];
    let mut sqs = [0.0f64; 4];
    let n_total = 4096;
    for _ in 0..16 {
        let n = n_total / 16;
        let mut data = vec![0.0f32; n * 4];
        for s in 0..n {
            for c in 0..4 {
                let z: f64 = rand_distr::Distribution::sample(
                    &rand_distr::StandardNormal,
                    &mut rng,
                );
                let v = mus[c] + sigmas[c] * z;
                data[s * 4 + c] = v as f32;
                sums[c] += v;
                sqs[c] += v * v;
            }
        }
        batches.push(Tensor::from_vec(&[n, 4, 1, 1], data));
    }
    recalibrate_bn(&net, &mut w, &cfg, batches.into_iter()).unwrap();
    let bn = &w.bn["n1"];
    for c in 0..4 {
        let emp_mean = sums[c] / n_total as f64;
        let emp_var = sqs[c] / n_total as f64 - emp_mean * emp_mean;
        assert!(
            (bn.running_mean.data()[c] as f64 - emp_mean).abs() < 1e-3,
            "channel {c} mean"
        );
        assert!(
            (bn.running_var.data()[c] as f64 - emp_var).abs() < 1e-3,
            "channel {c} var"
        );
    }
}

#[test]
fn recalibration_is_partition_invariant() {
    let net = calib_net();
    let mut base = SlimmableWeights::<f32>::init(&net, 1);
    identity_conv(&mut base);
    let cfg = max_config(&net, net.bounds());
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let data: Vec<f32> = (0..4096 * 4).map(|_| rng.gen_range(-2.0f32..2.0)).collect();
    let chunked = |sz: usize| {
        let mut w = base.clone();
        let batches: Vec<Tensor<f32>> = data
            .chunks(sz * 4)
            .map(|c| Tensor::from_vec(&[c.len() / 4, 4, 1, 1], c.to_vec()))
            .collect();
        recalibrate_bn(&net, &mut w, &cfg, batches.into_iter()).unwrap();
        w
    };
    let a = chunked(512);
    let b = chunked(1024);
    for c in 0..4 {
        assert!(
            (a.bn["n1"].running_mean.data()[c] - b.bn["n1"].running_mean.data()[c]).abs() < 1e-5
        );
        assert!(
            (a.bn["n1"].running_var.data()[c] - b.bn["n1"].running_var.data()[c]).abs() < 1e-5
        );
    }
}

#[test]
fn calibration_only_observes() {
    let net = toy_net();
    let mut w = SlimmableWeights::<f32>::init(&net, 2);
    let cfg = max_config(&net, net.bounds());
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (c, h, wd) = net.spec.input_shape;
    let data: Vec<f32> = (0..16 * c * h * wd).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let batch = Tensor::from_vec(&[16, c, h, wd], data);
    let labels: Vec<usize> = (0..16).map(|_| rng.gen_range(0..3)).collect();
    let before = forward_loss(&net, &w, &cfg, &batch, &Targets::Hard(&labels)).unwrap();
    recalibrate_bn(&net, &mut w, &cfg, std::iter::once(batch.clone())).unwrap();
    let after = forward_loss(&net, &w, &cfg, &batch, &Targets::Hard(&labels)).unwrap();
    assert_eq!(before, after);
}

#[test]
fn empty_stream_is_an_error() {
    let net = calib_net();
    let mut w = SlimmableWeights::<f32>::init(&net, 1);
    let cfg = max_config(&net, net.bounds());
    let r = recalibrate_bn(&net, &mut w, &cfg, std::iter::empty::<Tensor<f32>>());
    assert!(matches!(r, Err(EngineError::EmptyStream)));
}

#[test]
fn batch_shape_mismatch_is_an_error() {
    let net = toy_net();
    let w = SlimmableWeights::<f32>::init(&net, 2);
    let cfg = max_config(&net, net.bounds());
    let batch = Tensor::<f32>::zeros(&[2, 1, 6, 6]);
    assert!(matches!(
        forward_eval(&net, &w, &cfg, &batch),
        Err(EngineError::BatchShape { .. })
    ));
}

