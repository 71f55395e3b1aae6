//! Greedy slimming over a trained slimmable network.
//!
//! Starting from the largest model, every step evaluates all single-group
//! slimming candidates and commits the one with the highest estimated
//! accuracy (minimal drop against the previous committed config). One pass
//! yields configurations for every budget down to the stopping constraint.
//! No training happens here; only BN statistics of evaluated slices move.

use std::path::Path;

use thiserror::Error;

use crate::data::DatasetHandle;
use crate::engine::{accuracy, recalibrate_bn, EngineError, SlimmableWeights};
use crate::netspec::{max_config, slim_candidates, ChannelConfig, Network, SpecError, WidthBounds};
use crate::resource::{budget_satisfied, Budget, ResourceError, ResourceReport};

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("estimator failure: {0}")]
    Estimator(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Resource(#[from] ResourceError),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("holdout split is empty")]
    EmptyHoldout,
    #[error(
        "budget {budget} unreachable: floor config costs {floor_madds} madds; trace covers {steps} steps"
    )]
    BudgetUnreachable {
        budget: Budget,
        floor_madds: u64,
        steps: usize,
        /// Everything slimmed so far, ending at the all-minimum config.
        trace: SearchTrace,
    },
    #[error("no config in the trace satisfies {0}")]
    NoConfigMeetsBudget(Budget),
    #[error("trace file: {0}")]
    TraceIo(String),
}

/// Maps a channel configuration to estimated accuracy in [0, 1].
/// Deterministic for a fixed model/holdout/seed.
pub trait AccuracyEstimator {
    fn evaluate(&self, config: &ChannelConfig) -> Result<f64, SearchError>;
    fn id(&self) -> String {
        "estimator".to_string()
    }
}

/// Closure-backed estimator for tests and synthetic studies.
pub struct FnEstimator<F: Fn(&ChannelConfig) -> f64>(pub F);

impl<F: Fn(&ChannelConfig) -> f64> AccuracyEstimator for FnEstimator<F> {
    fn evaluate(&self, config: &ChannelConfig) -> Result<f64, SearchError> {
        Ok((self.0)(config))
    }
    fn id(&self) -> String {
        "synthetic-fn".to_string()
    }
}

/// The trained slimmable model as estimator: recalibrate BN statistics for
/// the candidate from a training-split stream, then single feed-forward
/// top-1 accuracy over the full holdout in eval mode.
pub struct SlimmableEstimator<'a> {
    pub net: &'a Network,
    pub weights: &'a SlimmableWeights<f32>,
    pub handle: &'a DatasetHandle,
    pub calibration_samples: usize,
    pub calibration_batch: usize,
    pub eval_chunk: usize,
}

impl<'a> SlimmableEstimator<'a> {
    pub fn new(
        net: &'a Network,
        weights: &'a SlimmableWeights<f32>,
        handle: &'a DatasetHandle,
    ) -> Self {
        SlimmableEstimator {
            net,
            weights,
            handle,
            calibration_samples: crate::slimtrain::CALIBRATION_SAMPLES,
            calibration_batch: crate::slimtrain::CALIBRATION_BATCH,
            eval_chunk: crate::slimtrain::EVAL_CHUNK,
        }
    }
}

impl AccuracyEstimator for SlimmableEstimator<'_> {
    fn evaluate(&self, config: &ChannelConfig) -> Result<f64, SearchError> {
        let hold = self.handle.holdout();
        if hold.is_empty() {
            return Err(SearchError::EmptyHoldout);
        }
        // Private copy: only this candidate's BN stats move, the shared
        // store stays immutable.
        let mut w = self.weights.clone();
        let n = self.calibration_samples.min(self.handle.train().len());
        let stream = self
            .handle
            .calibration_batches(n, self.calibration_batch)
            .map_err(|e| SearchError::Estimator(e.to_string()))?;
        recalibrate_bn(self.net, &mut w, config, stream.into_iter())?;
        Ok(accuracy(
            self.net,
            &w,
            config,
            &hold.images,
            &hold.labels,
            self.eval_chunk,
        )?)
    }

    fn id(&self) -> String {
        format!(
            "slimmable(holdout={} n={})",
            self.handle.name,
            self.handle.holdout().len()
        )
    }
}

#[derive(Debug, Clone)]
pub struct SearchStep {
    pub step: usize,
    /// Channel-set slimmed to reach this config; `None` for step 0.
    pub slimmed_set: Option<String>,
    pub config: ChannelConfig,
    pub report: ResourceReport,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TraceMeta {
    pub seed: u64,
    pub holdout_id: String,
    pub estimator_id: String,
}

#[derive(Debug, Clone)]
pub struct SearchTrace {
    pub steps: Vec<SearchStep>,
    pub meta: TraceMeta,
}

impl SearchTrace {
    pub fn floor(&self) -> &SearchStep {
        self.steps.last().expect("trace never empty")
    }
}

/// Greedy slimming from the largest model down to `stop_budget`.
pub fn greedy_search(
    estimator: &dyn AccuracyEstimator,
    net: &Network,
    bounds: &WidthBounds,
    cost_fn: &dyn Fn(&ChannelConfig) -> Result<ResourceReport, ResourceError>,
    stop_budget: &Budget,
) -> Result<SearchTrace, SearchError> {
    let mut current = max_config(net, bounds);
    let mut report = cost_fn(&current)?;
    let mut acc = estimator.evaluate(&current)?;
    let mut trace = SearchTrace {
        steps: vec![SearchStep {
            step: 0,
            slimmed_set: None,
            config: current.clone(),
            report,
            accuracy: acc,
        }],
        meta: TraceMeta {
            estimator_id: estimator.id(),
            ..TraceMeta::default()
        },
    };

    while !budget_satisfied(&report, stop_budget) {
        let candidates = slim_candidates(net, bounds, &current);
        if candidates.is_empty() {
            let floor_madds = report.madds;
            let steps = trace.steps.len();
            return Err(SearchError::BudgetUnreachable {
                budget: *stop_budget,
                floor_madds,
                steps,
                trace,
            });
        }
        // Evaluate every candidate; commit the most accurate. Exact ties
        // prefer the larger madds reduction, then spec order (first seen).
        let mut best: Option<(usize, f64, ResourceReport)> = None;
        for (i, (_, cand)) in candidates.iter().enumerate() {
            let cand_acc = estimator.evaluate(cand)?;
            let cand_report = cost_fn(cand)?;
            let better = match &best {
                None => true,
                Some((_, best_acc, best_report)) => {
                    cand_acc > *best_acc
                        || (cand_acc == *best_acc && cand_report.madds < best_report.madds)
                }
            };
            if better {
                best = Some((i, cand_acc, cand_report));
            }
        }
        let (idx, best_acc, best_report) = best.expect("candidates nonempty");
        let (set, config) = candidates.into_iter().nth(idx).expect("index in range");
        current = config;
        report = best_report;
        acc = best_acc;
        trace.steps.push(SearchStep {
            step: trace.steps.len(),
            slimmed_set: Some(set),
            config: current.clone(),
            report,
            accuracy: acc,
        });
    }
    Ok(trace)
}

/// Earliest (largest) trace entry satisfying the budget.
pub fn select_config<'a>(
    trace: &'a SearchTrace,
    budget: &Budget,
) -> Result<&'a SearchStep, SearchError> {
    trace
        .steps
        .iter()
        .find(|s| budget_satisfied(&s.report, budget))
        .ok_or(SearchError::NoConfigMeetsBudget(*budget))
}

const TRACE_HEADER: [&str; 9] = [
    "step",
    "slimmed_set",
    "madds",
    "params",
    "memory",
    "model_size",
    "latency_proxy",
    "accuracy",
    "config_json",
];

pub fn write_trace_csv(path: &Path, trace: &SearchTrace) -> Result<(), SearchError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| SearchError::TraceIo(e.to_string()))?;
    w.write_record(TRACE_HEADER)
        .map_err(|e| SearchError::TraceIo(e.to_string()))?;
    for s in &trace.steps {
        w.write_record(&[
            s.step.to_string(),
            s.slimmed_set.clone().unwrap_or_default(),
            s.report.madds.to_string(),
            s.report.params.to_string(),
            s.report.memory.to_string(),
            s.report.model_size.to_string(),
            format!("{}", s.report.latency_proxy),
            format!("{:.6}", s.accuracy),
            s.config.to_json(),
        ])
        .map_err(|e| SearchError::TraceIo(e.to_string()))?;
    }
    w.flush().map_err(|e| SearchError::TraceIo(e.to_string()))?;
    Ok(())
}

pub fn read_trace_csv(path: &Path) -> Result<SearchTrace, SearchError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| SearchError::TraceIo(e.to_string()))?;
    let mut steps = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| SearchError::TraceIo(e.to_string()))?;
        if rec.len() != TRACE_HEADER.len() {
            return Err(SearchError::TraceIo(format!(
                "expected {} columns, got {}",
                TRACE_HEADER.len(),
                rec.len()
            )));
        }
        let get = |i: usize| rec.get(i).unwrap_or_default();
        let parse_u = |i: usize| -> Result<u64, SearchError> {
            get(i)
                .parse()
                .map_err(|_| SearchError::TraceIo(format!("bad integer {:?}", get(i))))
        };
        let parse_f = |i: usize| -> Result<f64, SearchError> {
            get(i)
                .parse()
                .map_err(|_| SearchError::TraceIo(format!("bad float {:?}", get(i))))
        };
        steps.push(SearchStep {
            step: parse_u(0)? as usize,
            slimmed_set: if get(1).is_empty() {
                None
            } else {
                Some(get(1).to_string())
            },
            report: ResourceReport {
                madds: parse_u(2)?,
                params: parse_u(3)?,
                memory: parse_u(4)?,
                model_size: parse_u(5)?,
                latency_proxy: parse_f(6)?,
            },
            accuracy: parse_f(7)?,
            config: ChannelConfig::from_json(get(8))?,
        });
    }
    if steps.is_empty() {
        return Err(SearchError::TraceIo("trace has no steps".to_string()));
    }
    Ok(SearchTrace {
        steps,
        meta: TraceMeta::default(),
    })
}
