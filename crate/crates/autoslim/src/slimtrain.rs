//! Slimmable training: the sandwich rule with inplace distillation.
//!
//! Each step optimizes the largest width on ground truth, retains its
//! detached softmax as the teacher, then optimizes the smallest width and a
//! few random widths against the teacher. Gradients from all passes
//! accumulate into one SGD step, so the shared weights serve every width.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

use crate::data::{augment_batch, DatasetHandle};
use crate::engine::{
    self, accuracy, backward, recalibrate_bn, sgd_step, EngineError, GradStore, SgdHyper,
    SgdState, SlimmableWeights, Targets, Tensor,
};
use crate::netspec::{
    apply_width_multiplier, max_config, min_config, sample_random_config, ChannelConfig, Network,
    WidthBounds,
};

/// Calibration samples used before every holdout evaluation; BN statistics
/// are trustworthy once calibrated with batches beyond the 2K mark.
pub const CALIBRATION_SAMPLES: usize = 2048;
pub const CALIBRATION_BATCH: usize = 256;
pub const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    /// lr0 scaled linearly to zero over the full run.
    LinearDecay { lr0: f64 },
    /// lr0 cut by `gamma` at each milestone epoch.
    Step {
        lr0: f64,
        milestones: Vec<usize>,
        gamma: f64,
    },
    /// The full-training linear decay compressed into a short run: same
    /// shape, fewer steps.
    SqueezedLinear { lr0: f64 },
}

impl LrSchedule {
    pub fn lr0(&self) -> f64 {
        match self {
            LrSchedule::LinearDecay { lr0 }
            | LrSchedule::Step { lr0, .. }
            | LrSchedule::SqueezedLinear { lr0 } => *lr0,
        }
    }

    /// Learning rate for global step `step` of `total` in epoch `epoch`.
    pub fn at(&self, step: usize, total: usize, epoch: usize) -> f64 {
        match self {
            LrSchedule::LinearDecay { lr0 } | LrSchedule::SqueezedLinear { lr0 } => {
                lr0 * (1.0 - step as f64 / total.max(1) as f64)
            }
            LrSchedule::Step {
                lr0,
                milestones,
                gamma,
            } => {
                let cuts = milestones.iter().filter(|&&m| epoch >= m).count();
                lr0 * gamma.powi(cuts as i32)
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Random widths per sandwich step, in addition to max and min.
    pub n_random_widths: usize,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            epochs: 5,
            batch_size: 64,
            lr: LrSchedule::SqueezedLinear { lr0: 0.1 },
            momentum: 0.9,
            weight_decay: 1e-4,
            n_random_widths: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub acc_min: f64,
    pub acc_1x: f64,
    pub acc_max: f64,
    pub wallclock_s: f64,
}

/// Loss summary of one sandwich step.
#[derive(Debug, Clone)]
pub struct StepSummary {
    pub loss_max: f64,
    pub loss_min: Option<f64>,
    pub loss_random: Vec<f64>,
    pub passes: usize,
}

impl StepSummary {
    pub fn mean_loss(&self) -> f64 {
        let mut sum = self.loss_max;
        let mut n = 1.0;
        if let Some(l) = self.loss_min {
            sum += l;
            n += 1.0;
        }
        for l in &self.loss_random {
            sum += l;
            n += 1.0;
        }
        sum / n
    }
}

/// One sandwich step: forward/backward at max width with hard labels
/// (keeping its detached softmax as teacher), then the minimum width and
/// `n_random_widths` sampled widths against the teacher; gradients
/// accumulate across passes and a single SGD step is applied.
#[allow(clippy::too_many_arguments)]
pub fn sandwich_step(
    net: &Network,
    weights: &mut SlimmableWeights<f32>,
    bounds: &WidthBounds,
    batch: &Tensor<f32>,
    labels: &[usize],
    hyper: &SgdHyper,
    n_random_widths: usize,
    rng: &mut ChaCha8Rng,
    grads: &mut GradStore<f32>,
    state: &mut SgdState<f32>,
) -> Result<StepSummary, EngineError> {
    grads.reset();
    let cfg_max = max_config(net, bounds);
    let cfg_min = min_config(net, bounds);

    let out_max = backward(net, weights, &cfg_max, batch, &Targets::Hard(labels), grads)?;
    let teacher = engine::softmax_probs(&out_max.logits, net.spec.num_classes);

    let mut loss_min = None;
    if cfg_min != cfg_max {
        let o = backward(net, weights, &cfg_min, batch, &Targets::Soft(&teacher), grads)?;
        loss_min = Some(o.loss);
    }
    let mut loss_random = Vec::with_capacity(n_random_widths);
    for _ in 0..n_random_widths {
        let cfg = sample_random_config(net, bounds, rng);
        let o = backward(net, weights, &cfg, batch, &Targets::Soft(&teacher), grads)?;
        loss_random.push(o.loss);
    }
    let passes = 1 + usize::from(loss_min.is_some()) + loss_random.len();

    let summary = StepSummary {
        loss_max: out_max.loss,
        loss_min,
        loss_random,
        passes,
    };
    if !summary.mean_loss().is_finite() {
        return Err(EngineError::NonFinite("sandwich step".into()));
    }
    sgd_step(weights, grads, state, hyper);
    Ok(summary)
}

enum WidthPlan {
    /// Sandwich rule across the bounds.
    Sandwich(WidthBounds),
    /// Plain single-width SGD at a fixed configuration.
    Fixed(ChannelConfig),
}

/// Holdout accuracy at `config` after recalibrating BN statistics with a
/// fixed-order stream from the training split.
pub fn calibrated_accuracy(
    net: &Network,
    weights: &SlimmableWeights<f32>,
    config: &ChannelConfig,
    handle: &DatasetHandle,
) -> Result<f64, EngineError> {
    let mut w = weights.clone();
    let n = CALIBRATION_SAMPLES.min(handle.train().len());
    let stream = handle
        .calibration_batches(n, CALIBRATION_BATCH)
        .map_err(|e| EngineError::Config(e.to_string()))?;
    recalibrate_bn(net, &mut w, config, stream.into_iter())?;
    let hold = handle.holdout();
    accuracy(net, &w, config, &hold.images, &hold.labels, EVAL_CHUNK)
}

fn run_epochs(
    net: &Network,
    weights: &mut SlimmableWeights<f32>,
    handle: &DatasetHandle,
    schedule: &TrainSchedule,
    plan: &WidthPlan,
) -> Result<Vec<EpochLog>, EngineError> {
    let train = handle.train();
    let n = train.len();
    let steps_per_epoch = n.div_ceil(schedule.batch_size);
    let total_steps = steps_per_epoch * schedule.epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut grads = GradStore::zeros_like(weights);
    let mut state = SgdState::zeros_like(weights);
    let mut logs = Vec::with_capacity(schedule.epochs);
    let mut step = 0usize;
    let started = Instant::now();

    // Evaluation widths: the sandwich logs min / 1.0x / max, a fixed run
    // logs its own configuration in all three columns.
    let eval_cfgs: Vec<ChannelConfig> = match plan {
        WidthPlan::Sandwich(b) => vec![
            min_config(net, b),
            apply_width_multiplier(net, b, 1.0)
                .map_err(|e| EngineError::Config(e.to_string()))?,
            max_config(net, b),
        ],
        WidthPlan::Fixed(c) => vec![c.clone(), c.clone(), c.clone()],
    };

    for epoch in 0..schedule.epochs {
        let mut indices: Vec<usize> = (0..n).collect();
        indices.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut loss_count = 0.0f64;
        let mut lr_last = schedule.lr.lr0();
        for chunk in indices.chunks(schedule.batch_size) {
            let (mut batch, labels) = train.gather(chunk);
            if handle.augment {
                augment_batch(&mut batch, &mut rng);
            }
            let lr = schedule.lr.at(step, total_steps, epoch);
            lr_last = lr;
            let hyper = SgdHyper {
                lr,
                momentum: schedule.momentum,
                weight_decay: schedule.weight_decay,
            };
            let loss = match plan {
                WidthPlan::Sandwich(bounds) => {
                    let s = sandwich_step(
                        net,
                        weights,
                        bounds,
                        &batch,
                        &labels,
                        &hyper,
                        schedule.n_random_widths,
                        &mut rng,
                        &mut grads,
                        &mut state,
                    )?;
                    s.loss_max
                }
                WidthPlan::Fixed(cfg) => {
                    grads.reset();
                    let o = backward(net, weights, cfg, &batch, &Targets::Hard(&labels), &mut grads)?;
                    if !o.loss.is_finite() {
                        return Err(EngineError::NonFinite(format!("step {step}")));
                    }
                    sgd_step(weights, &grads, &mut state, &hyper);
                    o.loss
                }
            };
            loss_sum += loss;
            loss_count += 1.0;
            step += 1;
        }

        // Identical eval configs (the fixed-width plan) are evaluated once.
        let mut accs: Vec<f64> = Vec::with_capacity(eval_cfgs.len());
        for (i, c) in eval_cfgs.iter().enumerate() {
            let dup = eval_cfgs[..i].iter().position(|p| p == c);
            match dup {
                Some(j) => accs.push(accs[j]),
                None => accs.push(calibrated_accuracy(net, weights, c, handle)?),
            }
        }
        logs.push(EpochLog {
            epoch,
            lr: lr_last,
            train_loss: loss_sum / loss_count.max(1.0),
            acc_min: accs[0],
            acc_1x: accs[1],
            acc_max: accs[2],
            wallclock_s: started.elapsed().as_secs_f64(),
        });
    }
    Ok(logs)
}

/// Train a slimmable network with the sandwich rule; per-epoch holdout
/// accuracy is logged at the min / 1.0x / max widths after recalibration.
pub fn train_slimmable(
    net: &Network,
    weights: &mut SlimmableWeights<f32>,
    handle: &DatasetHandle,
    schedule: &TrainSchedule,
) -> Result<Vec<EpochLog>, EngineError> {
    run_epochs(
        net,
        weights,
        handle,
        schedule,
        &WidthPlan::Sandwich(*net.bounds()),
    )
}

/// Standard single-width training of one configuration, fresh weights.
/// Returns the trained store, the logs, and final calibrated holdout
/// accuracy at the configuration.
pub fn train_from_scratch(
    net: &Network,
    config: &ChannelConfig,
    handle: &DatasetHandle,
    schedule: &TrainSchedule,
) -> Result<(SlimmableWeights<f32>, Vec<EpochLog>, f64), EngineError> {
    let mut weights = SlimmableWeights::<f32>::init(net, schedule.seed);
    let logs = run_epochs(
        net,
        &mut weights,
        handle,
        schedule,
        &WidthPlan::Fixed(config.clone()),
    )?;
    let acc = calibrated_accuracy(net, &weights, config, handle)?;
    Ok((weights, logs, acc))
}

/// Training-log CSV: epoch, lr, train_loss, acc_min, acc_1x, acc_max,
/// wallclock_s.
pub fn write_log_csv(path: &std::path::Path, logs: &[EpochLog]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "lr", "train_loss", "acc_min", "acc_1x", "acc_max", "wallclock_s"])?;
    for l in logs {
        w.write_record(&[
            l.epoch.to_string(),
            format!("{:.6}", l.lr),
            format!("{:.6}", l.train_loss),
            format!("{:.6}", l.acc_min),
            format!("{:.6}", l.acc_1x),
            format!("{:.6}", l.acc_max),
            format!("{:.3}", l.wallclock_s),
        ])?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_dataset, DatasetName, DatasetOptions};
    use crate::netspec::parse_spec;
    use std::path::Path;

    fn toy_net() -> Network {
        parse_spec(
            r#"{
            "input_shape": [1, 12, 12],
            "num_classes": 4,
            "bounds": {"lower": 0.25, "upper": 1.5, "groups": 3},
            "layers": [
                {"id": "c1", "kind": "conv", "kernel": 3, "stride": 2, "base_channels": 8, "channel_set": "a"},
                {"id": "n1", "kind": "bn", "base_channels": 8, "channel_set": "a"},
                {"id": "r1", "kind": "relu", "base_channels": 8, "channel_set": "a"},
                {"id": "gap", "kind": "avgpool_global", "base_channels": 8, "channel_set": "a"},
                {"id": "fc", "kind": "fc", "base_channels": 4, "slimmable": false, "channel_set": "out"}
            ],
            "edges": [["c1", "n1"], ["n1", "r1"], ["r1", "gap"], ["gap", "fc"]]
        }"#,
        )
        .unwrap()
    }

    fn degenerate_net(doc_groups: &str) -> Network {
        parse_spec(
            &toy_net_doc().replace(
                "\"lower\": 0.25, \"upper\": 1.5, \"groups\": 3",
                doc_groups,
            ),
        )
        .unwrap()
    }

    fn toy_net_doc() -> String {
        r#"{
            "input_shape": [1, 12, 12],
            "num_classes": 4,
            "bounds": {"lower": 0.25, "upper": 1.5, "groups": 3},
            "layers": [
                {"id": "c1", "kind": "conv", "kernel": 3, "stride": 2, "base_channels": 8, "channel_set": "a"},
                {"id": "n1", "kind": "bn", "base_channels": 8, "channel_set": "a"},
                {"id": "r1", "kind": "relu", "base_channels": 8, "channel_set": "a"},
                {"id": "gap", "kind": "avgpool_global", "base_channels": 8, "channel_set": "a"},
                {"id": "fc", "kind": "fc", "base_channels": 4, "slimmable": false, "channel_set": "out"}
            ],
            "edges": [["c1", "n1"], ["n1", "r1"], ["r1", "gap"], ["gap", "fc"]]
        }"#
        .to_string()
    }

    fn tiny_handle(seed: u64) -> crate::data::DatasetHandle {
        let opts = DatasetOptions {
            holdout: 64,
            synthetic_train: 392,
            synthetic_test: 64,
            synthetic_shape: (1, 12, 12),
            synthetic_classes: 4,
            synthetic_noise: 0.6,
            ..DatasetOptions::default()
        };
        load_dataset(DatasetName::Synthetic, Path::new("."), seed, &opts).unwrap()
    }

    #[test]
    fn sandwich_pass_count_is_two_plus_random() {
        let net = toy_net();
        let handle = tiny_handle(1);
        let mut w = SlimmableWeights::<f32>::init(&net, 5);
        let mut grads = GradStore::zeros_like(&w);
        let mut state = SgdState::zeros_like(&w);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (batch, labels) = handle.train().gather(&[0, 1, 2, 3]);
        let s = sandwich_step(
            &net,
            &mut w,
            net.bounds(),
            &batch,
            &labels,
            &SgdHyper {
                lr: 0.01,
                momentum: 0.9,
                weight_decay: 1e-4,
            },
            2,
            &mut rng,
            &mut grads,
            &mut state,
        )
        .unwrap();
        assert_eq!(s.passes, 4);
    }

    #[test]
    fn teacher_rows_sum_to_one() {
        let net = toy_net();
        let handle = tiny_handle(3);
        let mut w = SlimmableWeights::<f32>::init(&net, 5);
        let (batch, labels) = handle.train().gather(&[0, 1, 2, 3, 4, 5, 6, 7]);
        let mut grads = GradStore::zeros_like(&w);
        let cfg = max_config(&net, net.bounds());
        let out = backward(&net, &mut w, &cfg, &batch, &Targets::Hard(&labels), &mut grads).unwrap();
        let teacher = engine::softmax_probs(&out.logits, net.spec.num_classes);
        for i in 0..8 {
            let s: f32 = teacher.data()[i * 4..(i + 1) * 4].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    /// With lower == upper and no random widths, the sandwich reduces to
    /// plain single-width SGD: identical loss trace and weights, bitwise.
    #[test]
    fn degenerate_bounds_match_from_scratch_training() {
        let net = degenerate_net("\"lower\": 0.999, \"upper\": 1.0, \"groups\": 4");
        let handle = tiny_handle(7);
        let schedule = TrainSchedule {
            epochs: 2,
            batch_size: 32,
            lr: LrSchedule::LinearDecay { lr0: 0.05 },
            momentum: 0.9,
            weight_decay: 1e-4,
            n_random_widths: 0,
            seed: 11,
        };
        // k_min = ceil(4*0.999) = 4 = G: min config == max config.
        assert_eq!(min_config(&net, net.bounds()), max_config(&net, net.bounds()));

        let mut w1 = SlimmableWeights::<f32>::init(&net, schedule.seed);
        let logs1 = train_slimmable(&net, &mut w1, &handle, &schedule).unwrap();
        let (w2, logs2, _) =
            train_from_scratch(&net, &max_config(&net, net.bounds()), &handle, &schedule).unwrap();

        for (a, b) in logs1.iter().zip(&logs2) {
            assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
        }
        for (id, p) in &w1.params {
            assert_eq!(p.weight.data(), w2.params[id].weight.data(), "{id}");
            assert_eq!(p.bias.data(), w2.params[id].bias.data(), "{id}");
        }
        for (id, b) in &w1.bn {
            assert_eq!(b.gamma.data(), w2.bn[id].gamma.data(), "{id}");
        }
    }

    #[test]
    fn zero_epochs_leaves_weights_unchanged() {
        let net = toy_net();
        let handle = tiny_handle(4);
        let schedule = TrainSchedule {
            epochs: 0,
            ..TrainSchedule::default()
        };
        let mut w = SlimmableWeights::<f32>::init(&net, 5);
        let before = w.clone();
        let logs = train_slimmable(&net, &mut w, &handle, &schedule).unwrap();
        assert!(logs.is_empty());
        for (id, p) in &before.params {
            assert_eq!(p.weight.data(), w.params[id].weight.data());
        }
    }

    #[test]
    fn squeezed_lr_is_nonincreasing_to_floor() {
        let lr = LrSchedule::SqueezedLinear { lr0: 0.4 };
        let total = 37;
        let mut prev = f64::INFINITY;
        let mut last = 0.0;
        for t in 0..total {
            let v = lr.at(t, total, 0);
            assert!(v <= prev);
            assert!(v > 0.0);
            prev = v;
            last = v;
        }
        // Floor is attained at the final step.
        assert_eq!(last, (0..total).map(|t| lr.at(t, total, 0)).fold(f64::INFINITY, f64::min));
    }

    #[test]
    fn step_schedule_cuts_at_milestones() {
        let lr = LrSchedule::Step {
            lr0: 0.1,
            milestones: vec![2, 4],
            gamma: 0.1,
        };
        assert!((lr.at(0, 100, 0) - 0.1).abs() < 1e-12);
        assert!((lr.at(50, 100, 2) - 0.01).abs() < 1e-12);
        assert!((lr.at(90, 100, 4) - 0.001).abs() < 1e-12);
    }

    #[test]
    fn epoch_logs_are_deterministic_given_seed() {
        let net = toy_net();
        let handle = tiny_handle(9);
        let schedule = TrainSchedule {
            epochs: 2,
            batch_size: 32,
            lr: LrSchedule::SqueezedLinear { lr0: 0.05 },
            n_random_widths: 2,
            seed: 13,
            ..TrainSchedule::default()
        };
        let mut w1 = SlimmableWeights::<f32>::init(&net, 1);
        let l1 = train_slimmable(&net, &mut w1, &handle, &schedule).unwrap();
        let mut w2 = SlimmableWeights::<f32>::init(&net, 1);
        let l2 = train_slimmable(&net, &mut w2, &handle, &schedule).unwrap();
        for (a, b) in l1.iter().zip(&l2) {
            assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
            assert_eq!(a.acc_max.to_bits(), b.acc_max.to_bits());
        }
    }

    /// Gradients must not flow into the teacher: distilling against the live
    /// teacher equals distilling against a frozen copy of it.
    #[test]
    fn teacher_is_detached() {
        let net = toy_net();
        let handle = tiny_handle(5);
        let (batch, labels) = handle.train().gather(&(0..16).collect::<Vec<_>>());
        let bounds = *net.bounds();
        let base = SlimmableWeights::<f32>::init(&net, 21);

        // Run A: teacher computed in the same step (live store).
        let mut wa = base.clone();
        let mut ga = GradStore::zeros_like(&wa);
        let out = backward(&net, &mut wa, &max_config(&net, &bounds), &batch, &Targets::Hard(&labels), &mut ga).unwrap();
        let teacher_live = engine::softmax_probs(&out.logits, net.spec.num_classes);
        let mut ga_min = GradStore::zeros_like(&wa);
        backward(&net, &mut wa, &min_config(&net, &bounds), &batch, &Targets::Soft(&teacher_live), &mut ga_min).unwrap();

        // Run B: teacher recomputed from an explicitly frozen copy.
        let mut wb = base.clone();
        let mut gb = GradStore::zeros_like(&wb);
        let frozen = wb.clone();
        backward(&net, &mut wb, &max_config(&net, &bounds), &batch, &Targets::Hard(&labels), &mut gb).unwrap();
        let frozen_logits = {
            let mut tmp = frozen.clone();
            let mut scratch = GradStore::zeros_like(&tmp);
            let o = backward(&net, &mut tmp, &max_config(&net, &bounds), &batch, &Targets::Hard(&labels), &mut scratch).unwrap();
            o.logits
        };
        let teacher_frozen = engine::softmax_probs(&frozen_logits, net.spec.num_classes);
        let mut gb_min = GradStore::zeros_like(&wb);
        backward(&net, &mut wb, &min_config(&net, &bounds), &batch, &Targets::Soft(&teacher_frozen), &mut gb_min).unwrap();

        for (id, p) in &ga_min.params {
            assert_eq!(p.weight.data(), gb_min.params[id].weight.data(), "{id}");
        }
    }
}
