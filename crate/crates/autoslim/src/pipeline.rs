//! End-to-end orchestration: train-slim -> search -> select -> train-final
//! -> report, with a manifest recording stage status and artifact hashes so
//! interrupted runs resume instead of recomputing.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{load_dataset, DataError, DatasetHandle, DatasetName, DatasetOptions};
use crate::engine::{self, checkpoint, EngineError, SlimmableWeights};
use crate::netspec::{parse_spec, uniform_config, ChannelConfig, Network, SpecError};
use crate::resource::{budget_satisfied, cost, Budget, ResourceError, ResourceReport};
use crate::slimsearch::{
    greedy_search, select_config, write_trace_csv, SearchError, SlimmableEstimator,
};
use crate::slimtrain::{
    train_from_scratch, train_slimmable, write_log_csv, LrSchedule, TrainSchedule,
    CALIBRATION_BATCH, CALIBRATION_SAMPLES, EVAL_CHUNK,
};

pub const STAGES: [&str; 5] = ["train-slim", "search", "select", "train-final", "report"];

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Resource(#[from] ResourceError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad run config: {0}")]
    BadConfig(String),
    #[error("missing stages: {0:?}")]
    MissingStages(Vec<String>),
    #[error("artifact {path} hash mismatch (expected {expected}, got {got})")]
    HashMismatch {
        path: String,
        expected: String,
        got: String,
    },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("test split was read before the report stage ({0} reads)")]
    TestIsolation(u64),
}

fn default_data_root() -> PathBuf {
    PathBuf::from("data")
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_slim_epochs() -> usize {
    5
}
fn default_final_epochs() -> usize {
    20
}
fn default_batch() -> usize {
    64
}
fn default_lr0() -> f64 {
    0.05
}
fn default_momentum() -> f64 {
    0.9
}
fn default_wd() -> f64 {
    1e-4
}
fn default_random_widths() -> usize {
    2
}
fn default_holdout() -> usize {
    5000
}

/// One self-contained experiment: spec, dataset, budgets, schedules.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub spec: PathBuf,
    pub dataset: String,
    #[serde(default = "default_data_root")]
    pub data_root: PathBuf,
    pub out_dir: PathBuf,
    /// Budgets like "madds=2.0e7", sorted descending; the last (strictest)
    /// one stops the greedy search.
    pub budgets: Vec<String>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_slim_epochs")]
    pub slim_epochs: usize,
    #[serde(default = "default_final_epochs")]
    pub final_epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr0")]
    pub lr0: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_random_widths")]
    pub n_random_widths: usize,
    #[serde(default = "default_holdout")]
    pub holdout: usize,
    #[serde(default)]
    pub train_limit: usize,
    #[serde(default)]
    pub test_limit: usize,
    #[serde(default)]
    pub synthetic_train: Option<usize>,
    #[serde(default)]
    pub synthetic_test: Option<usize>,
    #[serde(default)]
    pub synthetic_shape: Option<(usize, usize, usize)>,
    #[serde(default)]
    pub synthetic_noise: Option<f64>,
}

impl RunConfig {
    pub fn budgets(&self) -> Result<Vec<Budget>, PipelineError> {
        if self.budgets.is_empty() {
            return Err(PipelineError::BadConfig("at least one budget required".into()));
        }
        let parsed: Vec<Budget> = self
            .budgets
            .iter()
            .map(|s| Budget::parse(s))
            .collect::<Result<_, _>>()?;
        let metric = parsed[0].metric;
        for w in parsed.windows(2) {
            if w[0].metric != metric || w[1].metric != metric {
                return Err(PipelineError::BadConfig(
                    "budgets must share one metric".into(),
                ));
            }
            if w[1].limit >= w[0].limit {
                return Err(PipelineError::BadConfig(
                    "budgets must be sorted descending by limit".into(),
                ));
            }
        }
        Ok(parsed)
    }

    pub fn dataset_options(&self) -> DatasetOptions {
        let mut o = DatasetOptions {
            holdout: self.holdout,
            train_limit: self.train_limit,
            test_limit: self.test_limit,
            ..DatasetOptions::default()
        };
        if let Some(v) = self.synthetic_train {
            o.synthetic_train = v;
        }
        if let Some(v) = self.synthetic_test {
            o.synthetic_test = v;
        }
        if let Some(v) = self.synthetic_shape {
            o.synthetic_shape = v;
        }
        if let Some(v) = self.synthetic_noise {
            o.synthetic_noise = v;
        }
        o
    }

    pub fn slim_schedule(&self, seed: u64) -> TrainSchedule {
        TrainSchedule {
            epochs: self.slim_epochs,
            batch_size: self.batch_size,
            lr: LrSchedule::SqueezedLinear { lr0: self.lr0 },
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            n_random_widths: self.n_random_widths,
            seed,
        }
    }

    pub fn final_schedule(&self, seed: u64) -> TrainSchedule {
        TrainSchedule {
            epochs: self.final_epochs,
            batch_size: self.batch_size,
            lr: LrSchedule::LinearDecay { lr0: self.lr0 },
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            n_random_widths: 0,
            seed,
        }
    }

    pub fn load_handle(&self, seed: u64) -> Result<DatasetHandle, PipelineError> {
        let name: DatasetName = self
            .dataset
            .parse()
            .map_err(|e: DataError| PipelineError::BadConfig(e.to_string()))?;
        Ok(load_dataset(name, &self.data_root, seed, &self.dataset_options())?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct StageRecord {
    pub status: String,
    pub artifacts: Vec<ArtifactRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub run_config: RunConfig,
    pub stages: BTreeMap<String, StageRecord>,
}

pub fn file_sha256(path: &Path) -> std::io::Result<String> {
    let bytes = fs::read(path)?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(h.finalize().iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    }))
}

impl Manifest {
    fn path(out: &Path) -> PathBuf {
        out.join("manifest.json")
    }

    pub fn load_or_new(out: &Path, run_config: &RunConfig) -> Result<Self, PipelineError> {
        let p = Self::path(out);
        if p.exists() {
            let m: Manifest = serde_json::from_str(&fs::read_to_string(&p)?)
                .map_err(|e| PipelineError::Manifest(e.to_string()))?;
            return Ok(m);
        }
        Ok(Manifest {
            run_config: run_config.clone(),
            stages: BTreeMap::new(),
        })
    }

    pub fn load(out: &Path) -> Result<Self, PipelineError> {
        let p = Self::path(out);
        if !p.exists() {
            return Err(PipelineError::MissingStages(
                STAGES.iter().map(|s| s.to_string()).collect(),
            ));
        }
        serde_json::from_str(&fs::read_to_string(&p)?)
            .map_err(|e| PipelineError::Manifest(e.to_string()))
    }

    fn save(&self, out: &Path) -> Result<(), PipelineError> {
        let tmp = out.join("manifest.json.tmp");
        fs::write(&tmp, serde_json::to_string_pretty(self).unwrap())?;
        fs::rename(&tmp, Self::path(out))?;
        Ok(())
    }

    /// Stage is complete and all its artifacts still verify.
    pub fn stage_done(&self, out: &Path, stage: &str) -> bool {
        match self.stages.get(stage) {
            Some(rec) if rec.status == "done" => rec.artifacts.iter().all(|a| {
                let p = out.join(&a.path);
                p.exists() && file_sha256(&p).map(|h| h == a.sha256).unwrap_or(false)
            }),
            _ => false,
        }
    }

    pub fn record(
        &mut self,
        out: &Path,
        stage: &str,
        artifacts: &[PathBuf],
    ) -> Result<(), PipelineError> {
        let mut recs = Vec::new();
        for p in artifacts {
            let rel = p
                .strip_prefix(out)
                .unwrap_or(p)
                .to_string_lossy()
                .to_string();
            recs.push(ArtifactRecord {
                path: rel,
                sha256: file_sha256(p)?,
            });
        }
        self.stages.insert(
            stage.to_string(),
            StageRecord {
                status: "done".to_string(),
                artifacts: recs,
            },
        );
        self.save(out)
    }

    pub fn verify_artifacts(&self, out: &Path) -> Result<(), PipelineError> {
        for rec in self.stages.values() {
            for a in &rec.artifacts {
                let p = out.join(&a.path);
                if !p.exists() {
                    return Err(PipelineError::HashMismatch {
                        path: a.path.clone(),
                        expected: a.sha256.clone(),
                        got: "missing".to_string(),
                    });
                }
                let got = file_sha256(&p)?;
                if got != a.sha256 {
                    return Err(PipelineError::HashMismatch {
                        path: a.path.clone(),
                        expected: a.sha256.clone(),
                        got,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Selected configuration for one budget, frozen to disk during `select`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Selection {
    pub budget: String,
    pub step: usize,
    pub config: ChannelConfig,
    pub report: ResourceReport,
    pub estimator_accuracy: f64,
}

fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("s{seed}"))
}

/// Largest uniform-width configuration meeting the budget: the
/// width-multiplier heuristic baseline at matched cost.
pub fn uniform_baseline(
    net: &Network,
    budget: &Budget,
) -> Result<(usize, ChannelConfig, ResourceReport), PipelineError> {
    let b = net.bounds();
    for k in (b.k_min()..=b.groups).rev() {
        let cfg = uniform_config(net, k);
        let r = cost(net, &cfg, net.spec.input_shape)?;
        if budget_satisfied(&r, budget) {
            return Ok((k, cfg, r));
        }
    }
    Err(PipelineError::BadConfig(format!(
        "no uniform width satisfies {budget}"
    )))
}

pub struct StageOutcome {
    pub stage: &'static str,
    pub skipped: bool,
}

/// Run all five stages for every seed. Already-complete stages (per the
/// manifest, with verified artifact hashes) are skipped.
pub fn run_pipeline(run: &RunConfig) -> Result<Vec<StageOutcome>, PipelineError> {
    let budgets = run.budgets()?;
    let strictest = *budgets.last().expect("validated nonempty");
    fs::create_dir_all(&run.out_dir)?;
    let spec_text = fs::read_to_string(&run.spec)?;
    let net = parse_spec(&spec_text)?;
    let mut manifest = Manifest::load_or_new(&run.out_dir, run)?;
    let mut outcomes = Vec::new();

    for &seed in &run.seeds {
        let dir = seed_dir(&run.out_dir, seed);
        fs::create_dir_all(&dir)?;
        // Once a stage actually runs, everything downstream is stale and
        // must run too, even if its old artifacts still verify.
        let mut dirty = false;
        let handle = run.load_handle(seed)?;
        if net.spec.input_shape != handle.input_shape {
            return Err(PipelineError::BadConfig(format!(
                "spec input {:?} does not match dataset shape {:?}",
                net.spec.input_shape, handle.input_shape
            )));
        }

        // Stage 1: train the slimmable estimator.
        let slim_ckpt = dir.join("slim.aslm");
        let slim_log = dir.join("slim_log.csv");
        let stage1 = format!("s{seed}/train-slim");
        if !dirty && manifest.stage_done(&run.out_dir, &stage1) {
            outcomes.push(StageOutcome { stage: "train-slim", skipped: true });
        } else {
            dirty = true;
            let mut weights = SlimmableWeights::<f32>::init(&net, seed);
            let logs = train_slimmable(&net, &mut weights, &handle, &run.slim_schedule(seed))?;
            checkpoint::save(&slim_ckpt, &net, &weights)?;
            write_log_csv(&slim_log, &logs)?;
            manifest.record(&run.out_dir, &stage1, &[slim_ckpt.clone(), slim_log.clone()])?;
            outcomes.push(StageOutcome { stage: "train-slim", skipped: false });
        }

        // Stage 2: greedy search to the strictest budget.
        let trace_path = dir.join("trace.csv");
        let stage2 = format!("s{seed}/search");
        if !dirty && manifest.stage_done(&run.out_dir, &stage2) {
            outcomes.push(StageOutcome { stage: "search", skipped: true });
        } else {
            dirty = true;
            let weights = checkpoint::load(&slim_ckpt, &net)?;
            let estimator = SlimmableEstimator::new(&net, &weights, &handle);
            let cost_fn = |c: &ChannelConfig| cost(&net, c, net.spec.input_shape);
            let mut trace = greedy_search(&estimator, &net, net.bounds(), &cost_fn, &strictest)?;
            trace.meta.seed = seed;
            trace.meta.holdout_id = format!("{}:{}", handle.name, handle.holdout().len());
            write_trace_csv(&trace_path, &trace)?;
            manifest.record(&run.out_dir, &stage2, &[trace_path.clone()])?;
            outcomes.push(StageOutcome { stage: "search", skipped: false });
        }

        // Stage 3: pick a config per budget from the single trace.
        let stage3 = format!("s{seed}/select");
        let selection_paths: Vec<PathBuf> = (0..budgets.len())
            .map(|i| dir.join(format!("selected_{i}.json")))
            .collect();
        if !dirty && manifest.stage_done(&run.out_dir, &stage3) {
            outcomes.push(StageOutcome { stage: "select", skipped: true });
        } else {
            dirty = true;
            let trace = crate::slimsearch::read_trace_csv(&trace_path)?;
            for (i, budget) in budgets.iter().enumerate() {
                let step = select_config(&trace, budget)?;
                let sel = Selection {
                    budget: budget.to_string(),
                    step: step.step,
                    config: step.config.clone(),
                    report: step.report,
                    estimator_accuracy: step.accuracy,
                };
                fs::write(&selection_paths[i], serde_json::to_string_pretty(&sel).unwrap())?;
            }
            manifest.record(&run.out_dir, &stage3, &selection_paths)?;
            outcomes.push(StageOutcome { stage: "select", skipped: false });
        }

        // Nothing so far may have touched the test split.
        if handle.test_reads() > 0 {
            return Err(PipelineError::TestIsolation(handle.test_reads()));
        }

        // Stage 4: retrain selected configs and matched uniform baselines
        // from scratch.
        let stage4 = format!("s{seed}/train-final");
        let mut stage4_artifacts = Vec::new();
        for i in 0..budgets.len() {
            stage4_artifacts.push(dir.join(format!("final_{i}.aslm")));
            stage4_artifacts.push(dir.join(format!("final_log_{i}.csv")));
            stage4_artifacts.push(dir.join(format!("baseline_{i}.json")));
            stage4_artifacts.push(dir.join(format!("baseline_{i}.aslm")));
            stage4_artifacts.push(dir.join(format!("baseline_log_{i}.csv")));
        }
        if !dirty && manifest.stage_done(&run.out_dir, &stage4) {
            outcomes.push(StageOutcome { stage: "train-final", skipped: true });
        } else {
            dirty = true;
            for (i, budget) in budgets.iter().enumerate() {
                let sel: Selection =
                    serde_json::from_str(&fs::read_to_string(&selection_paths[i])?)
                        .map_err(|e| PipelineError::Manifest(e.to_string()))?;
                let (w, logs, _) =
                    train_from_scratch(&net, &sel.config, &handle, &run.final_schedule(seed))?;
                checkpoint::save(&dir.join(format!("final_{i}.aslm")), &net, &w)?;
                write_log_csv(&dir.join(format!("final_log_{i}.csv")), &logs)?;

                let (k, base_cfg, base_report) = uniform_baseline(&net, budget)?;
                let base_sel = Selection {
                    budget: budget.to_string(),
                    step: k,
                    config: base_cfg.clone(),
                    report: base_report,
                    estimator_accuracy: 0.0,
                };
                fs::write(
                    dir.join(format!("baseline_{i}.json")),
                    serde_json::to_string_pretty(&base_sel).unwrap(),
                )?;
                let (bw, blogs, _) =
                    train_from_scratch(&net, &base_cfg, &handle, &run.final_schedule(seed))?;
                checkpoint::save(&dir.join(format!("baseline_{i}.aslm")), &net, &bw)?;
                write_log_csv(&dir.join(format!("baseline_log_{i}.csv")), &blogs)?;
            }
            manifest.record(&run.out_dir, &stage4, &stage4_artifacts)?;
            outcomes.push(StageOutcome { stage: "train-final", skipped: false });
        }

        // Stage 5: test-set evaluation and the comparison table.
        let stage5 = format!("s{seed}/report");
        let report_path = dir.join("report.csv");
        if !dirty && manifest.stage_done(&run.out_dir, &stage5) {
            outcomes.push(StageOutcome { stage: "report", skipped: true });
        } else {
            let rows = evaluate_seed(&net, &handle, &dir, &budgets)?;
            write_report_csv(&report_path, &rows)?;
            manifest.record(&run.out_dir, &stage5, &[report_path])?;
            outcomes.push(StageOutcome { stage: "report", skipped: false });
        }
    }
    Ok(outcomes)
}

#[derive(Debug, Clone, Serialize)]
pub struct ReportRow {
    pub model: String,
    pub seed: u64,
    pub budget: String,
    pub params: u64,
    pub madds: u64,
    pub top1_err: f64,
    /// baseline error minus this model's error, percentage points; only on
    /// searched rows.
    pub gain: Option<f64>,
}

fn test_error(
    net: &Network,
    handle: &DatasetHandle,
    ckpt: &Path,
    config: &ChannelConfig,
) -> Result<f64, PipelineError> {
    let mut w = checkpoint::load(ckpt, net)?;
    let n = CALIBRATION_SAMPLES.min(handle.train().len());
    let stream = handle.calibration_batches(n, CALIBRATION_BATCH)?;
    engine::recalibrate_bn(net, &mut w, config, stream.into_iter())?;
    let test = handle.test();
    let acc = engine::accuracy(net, &w, config, &test.images, &test.labels, EVAL_CHUNK)?;
    Ok((1.0 - acc) * 100.0)
}

fn evaluate_seed(
    net: &Network,
    handle: &DatasetHandle,
    dir: &Path,
    budgets: &[Budget],
) -> Result<Vec<ReportRow>, PipelineError> {
    let seed: u64 = dir
        .file_name()
        .and_then(|s| s.to_str())
        .and_then(|s| s.strip_prefix('s'))
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);
    let mut rows = Vec::new();
    for (i, budget) in budgets.iter().enumerate() {
        let base_sel: Selection =
            serde_json::from_str(&fs::read_to_string(dir.join(format!("baseline_{i}.json")))?)
                .map_err(|e| PipelineError::Manifest(e.to_string()))?;
        let sel: Selection =
            serde_json::from_str(&fs::read_to_string(dir.join(format!("selected_{i}.json")))?)
                .map_err(|e| PipelineError::Manifest(e.to_string()))?;
        let base_err = test_error(
            net,
            handle,
            &dir.join(format!("baseline_{i}.aslm")),
            &base_sel.config,
        )?;
        let slim_err = test_error(
            net,
            handle,
            &dir.join(format!("final_{i}.aslm")),
            &sel.config,
        )?;
        let b = net.bounds();
        let m = base_sel.step as f64 * b.upper / b.groups as f64;
        rows.push(ReportRow {
            model: format!("uniform {m:.2}x"),
            seed,
            budget: budget.to_string(),
            params: base_sel.report.params,
            madds: base_sel.report.madds,
            top1_err: base_err,
            gain: None,
        });
        rows.push(ReportRow {
            model: "autoslim".to_string(),
            seed,
            budget: budget.to_string(),
            params: sel.report.params,
            madds: sel.report.madds,
            top1_err: slim_err,
            gain: Some(base_err - slim_err),
        });
    }
    Ok(rows)
}

fn write_report_csv(path: &Path, rows: &[ReportRow]) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| PipelineError::Manifest(e.to_string()))?;
    w.write_record(["model", "seed", "budget", "params", "madds", "top1_err", "gain"])
        .map_err(|e| PipelineError::Manifest(e.to_string()))?;
    for r in rows {
        w.write_record(&[
            r.model.clone(),
            r.seed.to_string(),
            r.budget.clone(),
            r.params.to_string(),
            r.madds.to_string(),
            format!("{:.2}", r.top1_err),
            r.gain.map(|g| format!("{g:.2}")).unwrap_or_default(),
        ])
        .map_err(|e| PipelineError::Manifest(e.to_string()))?;
    }
    w.flush().map_err(|e| PipelineError::Manifest(e.to_string()))?;
    Ok(())
}

fn humanize(n: u64) -> String {
    if n >= 10_000_000 {
        format!("{:.0}M", n as f64 / 1e6)
    } else if n >= 1_000_000 {
        format!("{:.1}M", n as f64 / 1e6)
    } else if n >= 1_000 {
        format!("{:.1}K", n as f64 / 1e3)
    } else {
        n.to_string()
    }
}

/// Rebuild the comparison table from a finished pipeline directory.
/// Fails if stages are missing or any recorded artifact hash mismatches.
pub fn report(out_dir: &Path) -> Result<String, PipelineError> {
    let manifest = Manifest::load(out_dir)?;
    let run = &manifest.run_config;
    let missing: Vec<String> = run
        .seeds
        .iter()
        .flat_map(|s| STAGES.iter().map(move |st| format!("s{s}/{st}")))
        .filter(|stage| !matches!(manifest.stages.get(stage), Some(r) if r.status == "done"))
        .collect();
    if !missing.is_empty() {
        return Err(PipelineError::MissingStages(missing));
    }
    manifest.verify_artifacts(out_dir)?;

    let budgets = run.budgets()?;
    let net = parse_spec(&fs::read_to_string(&run.spec)?)?;
    let mut table = String::new();
    let _ = writeln!(
        table,
        "{:<18} {:>5} {:>18} {:>10} {:>10} {:>9} {:>7}",
        "model", "seed", "budget", "params", "madds", "top1 err", "gain"
    );
    for &seed in &run.seeds {
        let dir = seed_dir(out_dir, seed);
        let handle = run.load_handle(seed)?;
        let rows = evaluate_seed(&net, &handle, &dir, &budgets)?;
        for r in &rows {
            let _ = writeln!(
                table,
                "{:<18} {:>5} {:>18} {:>10} {:>10} {:>9.2} {:>7}",
                r.model,
                r.seed,
                r.budget,
                humanize(r.params),
                humanize(r.madds),
                r.top1_err,
                r.gain.map(|g| format!("{g:.2}")).unwrap_or_default(),
            );
        }
    }
    Ok(table)
}
