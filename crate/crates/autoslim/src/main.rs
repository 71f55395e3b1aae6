//! autoslim command line: train a slimmable estimator, greedily slim it
//! under budgets, retrain found configurations, and report comparisons.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use autoslim::data::DatasetName;
use autoslim::engine::{checkpoint, SlimmableWeights};
use autoslim::netspec::{apply_width_multiplier, parse_spec, ChannelConfig};
use autoslim::pipeline::{self, RunConfig, Selection};
use autoslim::resource::{cost_with_alpha, layer_costs, Budget, DEFAULT_DW_ALPHA};
use autoslim::slimsearch::{
    greedy_search, read_trace_csv, select_config, write_trace_csv, SlimmableEstimator,
};
use autoslim::slimtrain::{
    train_from_scratch, train_slimmable, write_log_csv, LrSchedule, TrainSchedule,
};

#[derive(Parser)]
#[command(name = "autoslim", version, about = "channel-number architecture search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct DataArgs {
    /// Dataset: mnist | cifar10 | synthetic.
    #[arg(long, default_value = "synthetic")]
    dataset: String,
    /// Dataset root (AUTOSLIM_DATA is the fallback).
    #[arg(long, default_value = "data")]
    data_root: PathBuf,
    /// Holdout samples carved from the training split.
    #[arg(long, default_value_t = 5000)]
    holdout: usize,
    /// Cap on training samples (0 = all).
    #[arg(long, default_value_t = 0)]
    train_limit: usize,
    /// Synthetic dataset size.
    #[arg(long, default_value_t = 12000)]
    synthetic_train: usize,
    /// Synthetic input shape, e.g. 3x32x32.
    #[arg(long, default_value = "3x32x32")]
    synthetic_shape: String,
}

#[derive(clap::Args, Clone)]
struct TrainArgs {
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    #[arg(long, default_value_t = 2)]
    random_widths: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Train the weight-shared slimmable network (the accuracy estimator).
    TrainSlim {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 5)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Greedy slimming of a trained checkpoint down to a budget.
    Search {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        spec: PathBuf,
        /// Stop constraint, e.g. madds=2.0e7.
        #[arg(long)]
        budget: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Pick the config for a budget out of a search trace.
    Select {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        budget: String,
    },
    /// Retrain one configuration from scratch.
    TrainFinal {
        #[arg(long)]
        spec: PathBuf,
        /// Selection JSON from `select`, or a bare {channel_set: groups} map.
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Comparison table for a finished pipeline directory.
    Report { dir: PathBuf },
    /// Per-layer cost table (CSV) for a spec at a uniform width.
    CostReport {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        width: f64,
        /// Latency-proxy weighting of depthwise MAdds.
        #[arg(long, default_value_t = DEFAULT_DW_ALPHA)]
        dw_alpha: f64,
    },
    /// Run train-slim -> search -> select -> train-final -> report from a
    /// RunConfig JSON; stages resume from the manifest.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
    },
}

fn parse_shape(s: &str) -> Result<(usize, usize, usize), String> {
    let parts: Vec<usize> = s
        .split('x')
        .map(|p| p.parse().map_err(|_| format!("bad shape {s}")))
        .collect::<Result<_, _>>()?;
    if parts.len() != 3 {
        return Err(format!("bad shape {s}, expected CxHxW"));
    }
    Ok((parts[0], parts[1], parts[2]))
}

fn load_handle(data: &DataArgs, seed: u64) -> Result<autoslim::data::DatasetHandle, String> {
    let name: DatasetName = data.dataset.parse().map_err(|e| format!("{e}"))?;
    let opts = autoslim::data::DatasetOptions {
        holdout: data.holdout,
        train_limit: data.train_limit,
        synthetic_train: data.synthetic_train,
        synthetic_shape: parse_shape(&data.synthetic_shape)?,
        ..autoslim::data::DatasetOptions::default()
    };
    autoslim::data::load_dataset(name, &data.data_root, seed, &opts).map_err(|e| format!("{e}"))
}

fn schedule(train: &TrainArgs, epochs: usize, seed: u64, squeezed: bool) -> TrainSchedule {
    TrainSchedule {
        epochs,
        batch_size: train.batch_size,
        lr: if squeezed {
            LrSchedule::SqueezedLinear { lr0: train.lr }
        } else {
            LrSchedule::LinearDecay { lr0: train.lr }
        },
        momentum: train.momentum,
        weight_decay: train.weight_decay,
        n_random_widths: train.random_widths,
        seed,
    }
}

fn run() -> Result<(), String> {
    let cli = Cli::parse();
    match cli.command {
        Command::TrainSlim {
            spec,
            epochs,
            seed,
            out,
            data,
            train,
        } => {
            let net = parse_spec(&std::fs::read_to_string(&spec).map_err(|e| e.to_string())?)
                .map_err(|e| e.to_string())?;
            let handle = load_handle(&data, seed)?;
            let mut weights = SlimmableWeights::<f32>::init(&net, seed);
            let logs = train_slimmable(
                &net,
                &mut weights,
                &handle,
                &schedule(&train, epochs, seed, true),
            )
            .map_err(|e| e.to_string())?;
            std::fs::create_dir_all(&out).map_err(|e| e.to_string())?;
            checkpoint::save(&out.join("slim.aslm"), &net, &weights).map_err(|e| e.to_string())?;
            write_log_csv(&out.join("slim_log.csv"), &logs).map_err(|e| e.to_string())?;
            if let Some(last) = logs.last() {
                println!(
                    "trained {} epochs: loss {:.4}, holdout acc min/1x/max = {:.3}/{:.3}/{:.3}",
                    logs.len(),
                    last.train_loss,
                    last.acc_min,
                    last.acc_1x,
                    last.acc_max
                );
            }
            println!("checkpoint: {}", out.join("slim.aslm").display());
            Ok(())
        }
        Command::Search {
            ckpt,
            spec,
            budget,
            seed,
            out,
            data,
        } => {
            let net = parse_spec(&std::fs::read_to_string(&spec).map_err(|e| e.to_string())?)
                .map_err(|e| e.to_string())?;
            let weights = checkpoint::load(&ckpt, &net).map_err(|e| e.to_string())?;
            let handle = load_handle(&data, seed)?;
            let budget = Budget::parse(&budget).map_err(|e| e.to_string())?;
            let estimator = SlimmableEstimator::new(&net, &weights, &handle);
            let cost_fn =
                |c: &ChannelConfig| autoslim::resource::cost(&net, c, net.spec.input_shape);
            let mut trace = greedy_search(&estimator, &net, net.bounds(), &cost_fn, &budget)
                .map_err(|e| e.to_string())?;
            trace.meta.seed = seed;
            std::fs::create_dir_all(&out).map_err(|e| e.to_string())?;
            let path = out.join("trace.csv");
            write_trace_csv(&path, &trace).map_err(|e| e.to_string())?;
            println!(
                "trace: {} steps, {} -> {} madds ({})",
                trace.steps.len(),
                trace.steps.first().map(|s| s.report.madds).unwrap_or(0),
                trace.steps.last().map(|s| s.report.madds).unwrap_or(0),
                path.display()
            );
            Ok(())
        }
        Command::Select { trace, budget } => {
            let budget = Budget::parse(&budget).map_err(|e| e.to_string())?;
            let trace = read_trace_csv(&trace).map_err(|e| e.to_string())?;
            let step = select_config(&trace, &budget).map_err(|e| e.to_string())?;
            let sel = Selection {
                budget: budget.to_string(),
                step: step.step,
                config: step.config.clone(),
                report: step.report,
                estimator_accuracy: step.accuracy,
            };
            println!("{}", serde_json::to_string_pretty(&sel).unwrap());
            Ok(())
        }
        Command::TrainFinal {
            spec,
            config,
            epochs,
            seed,
            out,
            data,
            train,
        } => {
            let net = parse_spec(&std::fs::read_to_string(&spec).map_err(|e| e.to_string())?)
                .map_err(|e| e.to_string())?;
            let text = std::fs::read_to_string(&config).map_err(|e| e.to_string())?;
            let cfg = match serde_json::from_str::<Selection>(&text) {
                Ok(sel) => sel.config,
                Err(_) => ChannelConfig::from_json(&text).map_err(|e| e.to_string())?,
            };
            let handle = load_handle(&data, seed)?;
            let (weights, logs, acc) =
                train_from_scratch(&net, &cfg, &handle, &schedule(&train, epochs, seed, false))
                    .map_err(|e| e.to_string())?;
            std::fs::create_dir_all(&out).map_err(|e| e.to_string())?;
            checkpoint::save(&out.join("final.aslm"), &net, &weights).map_err(|e| e.to_string())?;
            write_log_csv(&out.join("final_log.csv"), &logs).map_err(|e| e.to_string())?;
            println!("final holdout accuracy: {acc:.4}");
            Ok(())
        }
        Command::Report { dir } => {
            let table = pipeline::report(&dir).map_err(|e| e.to_string())?;
            print!("{table}");
            Ok(())
        }
        Command::CostReport {
            spec,
            width,
            dw_alpha,
        } => {
            let net = parse_spec(&std::fs::read_to_string(&spec).map_err(|e| e.to_string())?)
                .map_err(|e| e.to_string())?;
            let cfg =
                apply_width_multiplier(&net, net.bounds(), width).map_err(|e| e.to_string())?;
            let per_layer =
                layer_costs(&net, &cfg, net.spec.input_shape).map_err(|e| e.to_string())?;
            let total = cost_with_alpha(&net, &cfg, net.spec.input_shape, dw_alpha)
                .map_err(|e| e.to_string())?;
            println!("layer_id,c_in,c_out,h,w,madds,params");
            for l in &per_layer {
                println!(
                    "{},{},{},{},{},{},{}",
                    l.id, l.c_in, l.c_out, l.h, l.w, l.madds, l.params
                );
            }
            println!(
                "# totals: madds={} params={} memory={} model_size={} latency_proxy={:.0}",
                total.madds, total.params, total.memory, total.model_size, total.latency_proxy
            );
            Ok(())
        }
        Command::Pipeline { config } => {
            let run: RunConfig = serde_json::from_str(
                &std::fs::read_to_string(&config).map_err(|e| e.to_string())?,
            )
            .map_err(|e| e.to_string())?;
            let outcomes = pipeline::run_pipeline(&run).map_err(|e| e.to_string())?;
            for o in &outcomes {
                println!(
                    "{:<12} {}",
                    o.stage,
                    if o.skipped { "skipped (manifest)" } else { "done" }
                );
            }
            let table = pipeline::report(&run.out_dir).map_err(|e| e.to_string())?;
            print!("{table}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
