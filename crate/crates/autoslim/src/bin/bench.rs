//! End-to-end direction probe: autoslim vs uniform baseline at matched
//! madds on the reduced spec, 3 final-training seed pairs.

use std::time::Instant;

use autoslim::data::{load_dataset, DatasetName, DatasetOptions};
use autoslim::engine::{self, SlimmableWeights};
use autoslim::netspec::{parse_spec, uniform_config, ChannelConfig};
use autoslim::resource::{cost, Budget, Metric};
use autoslim::slimsearch::{greedy_search, select_config, SlimmableEstimator};
use autoslim::slimtrain::{
    train_from_scratch, train_slimmable, LrSchedule, TrainSchedule, CALIBRATION_BATCH,
    CALIBRATION_SAMPLES, EVAL_CHUNK,
};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let noise: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1.5);
    let spec = std::fs::read_to_string("specs/mnv2_cifar_reduced.json").unwrap();
    let net = parse_spec(&spec).unwrap();
    let opts = DatasetOptions {
        holdout: 1500,
        synthetic_train: 7500,
        synthetic_test: 2000,
        synthetic_shape: (3, 32, 32),
        synthetic_noise: noise,
        ..DatasetOptions::default()
    };
    let handle = load_dataset(DatasetName::Synthetic, std::path::Path::new("."), 0, &opts).unwrap();
    println!("train {} holdout {} test(size) {}", handle.train().len(), handle.holdout().len(), 2000);

    // Slimmable estimator: 5 epochs (25% of final).
    let t0 = Instant::now();
    let slim_schedule = TrainSchedule {
        epochs: 5,
        batch_size: 64,
        lr: LrSchedule::SqueezedLinear { lr0: 0.05 },
        momentum: 0.9,
        weight_decay: 1e-4,
        n_random_widths: 2,
        seed: 0,
    };
    let mut w = SlimmableWeights::<f32>::init(&net, 0);
    let logs = train_slimmable(&net, &mut w, &handle, &slim_schedule).unwrap();
    println!(
        "slim train {:.0}s, last acc min/1x/max = {:.3}/{:.3}/{:.3}",
        t0.elapsed().as_secs_f64(),
        logs.last().unwrap().acc_min,
        logs.last().unwrap().acc_1x,
        logs.last().unwrap().acc_max
    );

    // Budget: uniform k=5 madds.
    let k_base = 5;
    let base_cfg = uniform_config(&net, k_base);
    let base_report = cost(&net, &base_cfg, net.spec.input_shape).unwrap();
    let budget = Budget { metric: Metric::Madds, limit: base_report.madds as f64 };
    println!("budget (uniform k={k_base}): {} madds", base_report.madds);

    let t1 = Instant::now();
    let estimator = SlimmableEstimator::new(&net, &w, &handle);
    let cost_fn = |c: &ChannelConfig| cost(&net, c, net.spec.input_shape);
    let trace = greedy_search(&estimator, &net, net.bounds(), &cost_fn, &budget).unwrap();
    println!("search {:.0}s, {} steps", t1.elapsed().as_secs_f64(), trace.steps.len());
    let sel = select_config(&trace, &budget).unwrap();
    println!(
        "selected: {} madds, est acc {:.3}, config {}",
        sel.report.madds, sel.accuracy, sel.config.to_json()
    );

    let test_err = |wts: &SlimmableWeights<f32>, cfg: &ChannelConfig| -> f64 {
        let mut wc = wts.clone();
        let stream = handle
            .calibration_batches(CALIBRATION_SAMPLES.min(handle.train().len()), CALIBRATION_BATCH)
            .unwrap();
        engine::recalibrate_bn(&net, &mut wc, cfg, stream.into_iter()).unwrap();
        let test = handle.test();
        let acc = engine::accuracy(&net, &wc, cfg, &test.images, &test.labels, EVAL_CHUNK).unwrap();
        (1.0 - acc) * 100.0
    };

    let mut wins = 0;
    for seed in 0..3u64 {
        let t = Instant::now();
        let final_schedule = TrainSchedule {
            epochs: 20,
            batch_size: 64,
            lr: LrSchedule::LinearDecay { lr0: 0.05 },
            momentum: 0.9,
            weight_decay: 1e-4,
            n_random_widths: 0,
            seed,
        };
        let (wa, _, _) = train_from_scratch(&net, &sel.config, &handle, &final_schedule).unwrap();
        let (wb, _, _) = train_from_scratch(&net, &base_cfg, &handle, &final_schedule).unwrap();
        let ea = test_err(&wa, &sel.config);
        let eb = test_err(&wb, &base_cfg);
        let win = ea <= eb;
        wins += win as u32;
        println!(
            "seed {seed}: autoslim err {ea:.2} vs baseline {eb:.2} -> {} ({:.0}s)",
            if win { "WIN" } else { "LOSS" },
            t.elapsed().as_secs_f64()
        );
    }
    println!("wins: {wins}/3");
}
