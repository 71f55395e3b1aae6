//! Quick difficulty probe: 3 slim epochs on the reduced spec.

use autoslim::data::{load_dataset, DatasetName, DatasetOptions};
use autoslim::engine::SlimmableWeights;
use autoslim::netspec::parse_spec;
use autoslim::slimtrain::{train_slimmable, LrSchedule, TrainSchedule};

fn main() {
    let noise: f64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(2.5);
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
    let handle =
        load_dataset(DatasetName::Synthetic, std::path::Path::new("."), 0, &opts).unwrap();
    let schedule = TrainSchedule {
        epochs: 3,
        batch_size: 64,
        lr: LrSchedule::SqueezedLinear { lr0: 0.05 },
        momentum: 0.9,
        weight_decay: 1e-4,
        n_random_widths: 2,
        seed: 0,
    };
    let mut w = SlimmableWeights::<f32>::init(&net, 0);
    let logs = train_slimmable(&net, &mut w, &handle, &schedule).unwrap();
    for l in &logs {
        println!(
            "noise {noise} epoch {}: loss {:.3} acc min/1x/max = {:.3}/{:.3}/{:.3}",
            l.epoch, l.train_loss, l.acc_min, l.acc_1x, l.acc_max
        );
    }
}
