//! Experiment plumbing: synthetic datasets, label corruption, experiment
//! configs, CSV metrics, grid comparisons, plot-data emission, and the
//! finite-difference check suites behind the `gradcheck` command.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metatrain::{
    hypergradient, train_mlrsnet, train_with_schedule, virtual_step, MetaTrainConfig, Phase,
    TrainStepRecord,
};
use crate::mlrsnet::{MLRSNetParams, MLRSNetState, Normalizer};
use crate::models::{
    gradient_check, Architecture, DataSplits, Dataset, LearnerModel, OptimizerKind,
};
use crate::numcore::{derive_seed, DenseMatrix, RngStream};
use crate::schedules::ScheduleSpec;
use crate::transfer::{run_transfer, TransferPlan};

/// Generator family for synthetic classification problems.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    /// Isotropic Gaussian clusters, class c centered at 2 * e_(c mod d).
    GaussianBlobs,
    /// Two interleaved half-circles (2 classes), extra dimensions pure noise.
    TwoMoonsLike,
}

/// One synthetic classification problem and its split sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub d: usize,
    pub classes: usize,
    pub noise_sigma: f64,
    /// Fraction of training labels to rewrite; val/test stay clean.
    pub corruption_fraction: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            kind: DatasetKind::GaussianBlobs,
            n_train: 1000,
            n_val: 200,
            n_test: 200,
            d: 10,
            classes: 3,
            noise_sigma: 0.6,
            corruption_fraction: 0.0,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        let n_min = self.classes;
        if self.n_train < n_min || self.n_val < n_min || self.n_test < n_min {
            return Err(Error::Config("every split needs at least one sample per class".into()));
        }
        if self.d == 0 {
            return Err(Error::Config("dimension must be >= 1".into()));
        }
        if self.kind == DatasetKind::TwoMoonsLike && (self.classes != 2 || self.d < 2) {
            return Err(Error::Config(
                "two-moons-like data needs exactly 2 classes and d >= 2".into(),
            ));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::Config(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        if !(0.0..=1.0).contains(&self.corruption_fraction) {
            return Err(Error::Config(format!(
                "corruption_fraction must be in [0, 1], got {}",
                self.corruption_fraction
            )));
        }
        Ok(())
    }
}

/// Mean of class `c`: radius 2 along coordinate axis c mod d.
fn blob_mean(c: usize, d: usize, out: &mut [f64]) {
    out.fill(0.0);
    out[c % d] = 2.0;
}

/// One split of `n` labelled points. Labels cycle 0..classes, so class
/// counts are balanced within one sample.
pub fn make_synthetic_dataset(
    kind: DatasetKind,
    n: usize,
    d: usize,
    classes: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 || n < classes || d == 0 {
        return Err(Error::Config(format!(
            "invalid dataset shape: n={n}, d={d}, classes={classes}"
        )));
    }
    if kind == DatasetKind::TwoMoonsLike && (classes != 2 || d < 2) {
        return Err(Error::Config(
            "two-moons-like data needs exactly 2 classes and d >= 2".into(),
        ));
    }
    let mut rng = RngStream::new(seed);
    let mut inputs = DenseMatrix::zeros(n, d);
    let mut labels = Vec::with_capacity(n);
    let mut mean = vec![0.0; d];
    for i in 0..n {
        let c = i % classes;
        labels.push(c);
        let row = inputs.row_mut(i);
        match kind {
            DatasetKind::GaussianBlobs => {
                blob_mean(c, d, &mut mean);
                for (j, v) in row.iter_mut().enumerate() {
                    *v = mean[j] + noise_sigma * rng.normal();
                }
            }
            DatasetKind::TwoMoonsLike => {
                let t = rng.uniform_in(0.0, std::f64::consts::PI);
                let (x, y) = if c == 0 {
                    (2.0 * t.cos(), 2.0 * t.sin())
                } else {
                    (2.0 - 2.0 * t.cos(), 1.0 - 2.0 * t.sin())
                };
                for (j, v) in row.iter_mut().enumerate() {
                    let base = match j {
                        0 => x,
                        1 => y,
                        _ => 0.0,
                    };
                    *v = base + noise_sigma * rng.normal();
                }
            }
        }
    }
    Ok(Dataset {
        inputs,
        labels,
        classes,
    })
}

/// Rewrites exactly round(fraction * n) uniformly chosen labels, each to a
/// uniformly chosen different class.
pub fn corrupt_labels(data: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!(
            "corruption fraction must be in [0, 1], got {fraction}"
        )));
    }
    let n = data.len();
    let count = (fraction * n as f64).round() as usize;
    let mut out = data.clone();
    if count == 0 {
        return Ok(out);
    }
    if data.classes < 2 {
        return Err(Error::Config("cannot corrupt labels with fewer than 2 classes".into()));
    }
    let mut rng = RngStream::new(seed);
    for i in rng.sample_indices(n, count) {
        let old = out.labels[i];
        let shift = 1 + rng.index(data.classes - 1);
        out.labels[i] = (old + shift) % data.classes;
    }
    Ok(out)
}

/// Train/val/test splits from independent derived streams; corruption is
/// applied to the training labels only.
pub fn make_splits(spec: &DatasetSpec) -> Result<DataSplits> {
    spec.validate()?;
    let split = |label: &str, n: usize| {
        make_synthetic_dataset(
            spec.kind,
            n,
            spec.d,
            spec.classes,
            spec.noise_sigma,
            derive_seed(spec.seed, label),
        )
    };
    let mut train = split("train-data", spec.n_train)?;
    if spec.corruption_fraction > 0.0 {
        train = corrupt_labels(
            &train,
            spec.corruption_fraction,
            derive_seed(spec.seed, "corrupt"),
        )?;
    }
    Ok(DataSplits {
        train,
        val: split("val-data", spec.n_val)?,
        test: split("test-data", spec.n_test)?,
    })
}

/// How a comparison grid entry trains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum CompareMethod {
    Meta { name: String },
    Baseline { name: String, schedule: ScheduleSpec },
}

impl CompareMethod {
    pub fn name(&self) -> &str {
        match self {
            CompareMethod::Meta { name } => name,
            CompareMethod::Baseline { name, .. } => name,
        }
    }
}

/// A full experiment: data, model, training horizon, and which runs to do.
/// Single-run commands read `schedule` or `transfer`; `compare` expands
/// `methods` x `seeds`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub model: Architecture,
    pub epochs: u64,
    pub train_batch: usize,
    pub val_batch: usize,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub weight_decay: f64,
    pub t_val: u64,
    pub gamma: f64,
    pub hidden_size: usize,
    pub normalizer: Normalizer,
    pub clip_norm: Option<f64>,
    pub adam_lr: f64,
    pub adam_weight_decay: f64,
    pub eval_every_epochs: u64,
    /// Every run seed must be listed; nothing is derived implicitly.
    pub seeds: Vec<u64>,
    pub schedule: Option<ScheduleSpec>,
    pub transfer: Option<TransferPlan>,
    pub reset_state_on_switch: bool,
    pub methods: Vec<CompareMethod>,
    pub output_dir: PathBuf,
    pub record_timings: bool,
    /// Save the per-epoch meta-net snapshots next to the final checkpoint.
    pub save_epoch_checkpoints: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSpec::default(),
            model: Architecture::SoftmaxRegression {
                inputs: 10,
                classes: 3,
            },
            epochs: 10,
            train_batch: 64,
            val_batch: 100,
            optimizer: OptimizerKind::Sgd,
            momentum: 0.9,
            weight_decay: 5e-4,
            t_val: 10,
            gamma: 1.0,
            hidden_size: 40,
            normalizer: Normalizer::Identity,
            clip_norm: None,
            adam_lr: 1e-3,
            adam_weight_decay: 1e-4,
            eval_every_epochs: 1,
            seeds: vec![0],
            schedule: None,
            transfer: None,
            reset_state_on_switch: false,
            methods: Vec::new(),
            output_dir: PathBuf::from("runs"),
            record_timings: false,
            save_epoch_checkpoints: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list must not be empty".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        let (inputs, classes) = match &self.model {
            Architecture::SoftmaxRegression { inputs, classes } => (*inputs, *classes),
            Architecture::Mlp {
                inputs, classes, ..
            } => (*inputs, *classes),
        };
        if inputs != self.dataset.d || classes != self.dataset.classes {
            return Err(Error::Config(format!(
                "model expects {inputs} inputs / {classes} classes, dataset provides {} / {}",
                self.dataset.d, self.dataset.classes
            )));
        }
        if let Some(s) = &self.schedule {
            s.validate()?;
        }
        if let Some(t) = &self.transfer {
            t.validate()?;
        }
        // The remaining knobs share the training-config rules.
        self.metatrain_config(self.seeds[0]).validate()
    }

    /// Steps per epoch: ceil(n_train / train_batch).
    pub fn steps_per_epoch(&self) -> u64 {
        let n = self.dataset.n_train as u64;
        let b = self.train_batch.max(1) as u64;
        n.div_ceil(b)
    }

    pub fn total_steps(&self) -> u64 {
        self.epochs * self.steps_per_epoch()
    }

    /// The per-run training config for one seed of this experiment.
    pub fn metatrain_config(&self, seed: u64) -> MetaTrainConfig {
        MetaTrainConfig {
            total_steps: self.total_steps(),
            steps_per_epoch: self.steps_per_epoch(),
            t_val: self.t_val,
            train_batch: self.train_batch,
            val_batch: self.val_batch,
            gamma: self.gamma,
            hidden_size: self.hidden_size,
            seed,
            normalizer: self.normalizer,
            clip_norm: self.clip_norm,
            adam_lr: self.adam_lr,
            adam_weight_decay: self.adam_weight_decay,
            optimizer: self.optimizer,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            eval_every_epochs: self.eval_every_epochs,
            record_timings: self.record_timings,
        }
    }

    /// SHA-256 over the serialized config; stable across runs, changes when
    /// any field changes.
    pub fn config_hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(text.as_bytes());
        format!("{:x}", hasher.finalize())
    }
}

/// Parses a JSON config file, reporting the byte offset on failure.
pub fn load_experiment_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
        offset: json_byte_offset(&text, e.line(), e.column()),
        message: e.to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

fn json_byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let mut remaining = line - 1;
    let mut offset = 0;
    for (idx, b) in text.bytes().enumerate() {
        if remaining == 0 {
            break;
        }
        if b == b'\n' {
            remaining -= 1;
            offset = idx + 1;
        }
    }
    (offset + column.saturating_sub(1)).min(text.len())
}

/// Ordered run metrics; the unit the CSV files store.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsTable {
    pub rows: Vec<TrainStepRecord>,
}

impl MetricsTable {
    pub fn new(rows: Vec<TrainStepRecord>) -> Self {
        MetricsTable { rows }
    }

    /// Step indices must be non-decreasing.
    pub fn validate(&self) -> Result<()> {
        for w in self.rows.windows(2) {
            if w[1].step < w[0].step {
                return Err(Error::Usage(format!(
                    "metrics rows out of order: step {} after {}",
                    w[1].step, w[0].step
                )));
            }
        }
        Ok(())
    }
}

pub const METRICS_HEADER: [&str; 9] = [
    "step",
    "epoch",
    "phase",
    "lr",
    "train_loss",
    "val_loss",
    "test_loss",
    "test_acc",
    "wall_us",
];

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        // Display for f64 is the shortest decimal that parses back to the
        // same bits, so the round trip is exact.
        Some(x) => format!("{x}"),
        None => String::new(),
    }
}

fn phase_str(p: Phase) -> &'static str {
    match p {
        Phase::Train => "train",
        Phase::Eval => "eval",
    }
}

/// Writes the fixed-header CSV atomically (temp file, then rename).
pub fn write_metrics(table: &MetricsTable, path: &Path) -> Result<()> {
    table.validate()?;
    let mut wtr = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Csv {
        line: 0,
        message: e.to_string(),
    };
    wtr.write_record(METRICS_HEADER).map_err(csv_err)?;
    for r in &table.rows {
        wtr.write_record([
            r.step.to_string(),
            r.epoch.to_string(),
            phase_str(r.phase).to_string(),
            fmt_opt(r.lr),
            fmt_opt(r.train_loss),
            fmt_opt(r.val_loss),
            fmt_opt(r.test_loss),
            fmt_opt(r.test_acc),
            r.wall_us.to_string(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = wtr
        .into_inner()
        .map_err(|e| Error::Csv {
            line: 0,
            message: e.to_string(),
        })?;
    atomic_write(path, &bytes)
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn parse_opt_f64(field: &str, name: &str, line: u64) -> Result<Option<f64>> {
    if field.is_empty() {
        return Ok(None);
    }
    field
        .parse::<f64>()
        .map(Some)
        .map_err(|e| Error::Csv {
            line,
            message: format!("bad {name} value {field:?}: {e}"),
        })
}

fn parse_u64(field: &str, name: &str, line: u64) -> Result<u64> {
    field.parse::<u64>().map_err(|e| Error::Csv {
        line,
        message: format!("bad {name} value {field:?}: {e}"),
    })
}

/// Reads a metrics CSV back; inverse of [`write_metrics`].
pub fn read_metrics(path: &Path) -> Result<MetricsTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());

    let headers = rdr.headers().map_err(|e| Error::Csv {
        line: 1,
        message: e.to_string(),
    })?;
    if headers.iter().ne(METRICS_HEADER.iter().copied()) {
        return Err(Error::Csv {
            line: 1,
            message: format!("unexpected header {:?}", headers.iter().collect::<Vec<_>>()),
        });
    }

    let mut rows = Vec::new();
    let mut prev_step: Option<u64> = None;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Csv {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != METRICS_HEADER.len() {
            return Err(Error::Csv {
                line,
                message: format!("expected {} fields, got {}", METRICS_HEADER.len(), rec.len()),
            });
        }
        let phase = match &rec[2] {
            "train" => Phase::Train,
            "eval" => Phase::Eval,
            other => {
                return Err(Error::Csv {
                    line,
                    message: format!("unknown phase {other:?}"),
                })
            }
        };
        let row = TrainStepRecord {
            step: parse_u64(&rec[0], "step", line)?,
            epoch: parse_u64(&rec[1], "epoch", line)?,
            phase,
            lr: parse_opt_f64(&rec[3], "lr", line)?,
            train_loss: parse_opt_f64(&rec[4], "train_loss", line)?,
            val_loss: parse_opt_f64(&rec[5], "val_loss", line)?,
            test_loss: parse_opt_f64(&rec[6], "test_loss", line)?,
            test_acc: parse_opt_f64(&rec[7], "test_acc", line)?,
            wall_us: parse_u64(&rec[8], "wall_us", line)?,
        };
        if let Some(prev) = prev_step {
            if row.step < prev {
                return Err(Error::Csv {
                    line,
                    message: format!("step {} decreases after {}", row.step, prev),
                });
            }
        }
        prev_step = Some(row.step);
        rows.push(row);
    }
    Ok(MetricsTable { rows })
}

/// Projects the plotting columns (step, lr, train_loss, val_loss, test_acc)
/// out of a metrics table into a second CSV.
pub fn emit_plots(table: &MetricsTable, path: &Path) -> Result<()> {
    table.validate()?;
    let mut wtr = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Csv {
        line: 0,
        message: e.to_string(),
    };
    wtr.write_record(["step", "lr", "train_loss", "val_loss", "test_acc"])
        .map_err(csv_err)?;
    for r in &table.rows {
        wtr.write_record([
            r.step.to_string(),
            fmt_opt(r.lr),
            fmt_opt(r.train_loss),
            fmt_opt(r.val_loss),
            fmt_opt(r.test_acc),
        ])
        .map_err(csv_err)?;
    }
    let bytes = wtr.into_inner().map_err(|e| Error::Csv {
        line: 0,
        message: e.to_string(),
    })?;
    atomic_write(path, &bytes)
}

/// Best/last evaluation metrics of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunStats {
    pub seed: u64,
    pub best_test_acc: f64,
    pub last_test_acc: f64,
    pub csv_path: PathBuf,
}

/// Per-method aggregate over the seed list.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodSummary {
    pub name: String,
    pub best_mean: f64,
    pub best_std: f64,
    pub last_mean: f64,
    pub last_std: f64,
    pub runs: Vec<RunStats>,
}

/// Result of a comparison grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareOutcome {
    pub methods: Vec<MethodSummary>,
    pub summary_path: PathBuf,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Extracts best/last test accuracy from a run's evaluation rows.
pub fn run_stats(records: &[TrainStepRecord], seed: u64, csv_path: PathBuf) -> Result<RunStats> {
    let accs: Vec<f64> = records
        .iter()
        .filter(|r| r.phase == Phase::Eval)
        .filter_map(|r| r.test_acc)
        .collect();
    if accs.is_empty() {
        return Err(Error::Config("run produced no evaluation rows".into()));
    }
    Ok(RunStats {
        seed,
        best_test_acc: accs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        last_test_acc: *accs.last().unwrap(),
        csv_path,
    })
}

/// Worker-thread bound: METASCHED_THREADS, default 1 so wall-clock columns
/// and file write order are exactly reproducible.
pub fn worker_threads() -> usize {
    std::env::var("METASCHED_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|n| *n >= 1)
        .unwrap_or(1)
}

fn run_method(
    method: &CompareMethod,
    cfg: &ExperimentConfig,
    data: &DataSplits,
    seed: u64,
) -> Result<Vec<TrainStepRecord>> {
    let mt = cfg.metatrain_config(seed);
    let mut records = Vec::new();
    match method {
        CompareMethod::Meta { .. } => {
            train_mlrsnet(&mt, data, &cfg.model, None, &mut records)?;
        }
        CompareMethod::Baseline { schedule, .. } => {
            train_with_schedule(schedule, &mt, data, &cfg.model, &mut records)?;
        }
    }
    Ok(records)
}

/// Runs every (method, seed) cell of the grid, writes one CSV per run plus
/// a summary CSV, and returns the per-method aggregates. Independent cells
/// may run on up to METASCHED_THREADS worker threads.
pub fn run_compare(cfg: &ExperimentConfig) -> Result<CompareOutcome> {
    cfg.validate()?;
    if cfg.methods.is_empty() {
        return Err(Error::Config("compare needs a non-empty methods list".into()));
    }
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let data = make_splits(&cfg.dataset)?;

    let jobs: Vec<(usize, u64)> = (0..cfg.methods.len())
        .flat_map(|m| cfg.seeds.iter().map(move |s| (m, *s)))
        .collect();
    let results: Vec<Mutex<Option<Result<RunStats>>>> =
        jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = worker_threads().min(jobs.len());

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let (m, seed) = jobs[i];
                let method = &cfg.methods[m];
                let outcome = run_method(method, cfg, &data, seed).and_then(|records| {
                    let path = cfg
                        .output_dir
                        .join(format!("{}-seed{}.csv", method.name(), seed));
                    write_metrics(&MetricsTable::new(records.clone()), &path)?;
                    run_stats(&records, seed, path)
                });
                *results[i].lock().unwrap() = Some(outcome);
            });
        }
    });

    let mut stats: Vec<RunStats> = Vec::with_capacity(jobs.len());
    for slot in results {
        stats.push(slot.into_inner().unwrap().expect("worker finished")?);
    }

    let mut methods = Vec::with_capacity(cfg.methods.len());
    for (m, method) in cfg.methods.iter().enumerate() {
        let runs: Vec<RunStats> = stats[m * cfg.seeds.len()..(m + 1) * cfg.seeds.len()].to_vec();
        let best: Vec<f64> = runs.iter().map(|r| r.best_test_acc).collect();
        let last: Vec<f64> = runs.iter().map(|r| r.last_test_acc).collect();
        let (best_mean, best_std) = mean_std(&best);
        let (last_mean, last_std) = mean_std(&last);
        methods.push(MethodSummary {
            name: method.name().to_string(),
            best_mean,
            best_std,
            last_mean,
            last_std,
            runs,
        });
    }

    let summary_path = cfg.output_dir.join("summary.csv");
    let mut wtr = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Csv {
        line: 0,
        message: e.to_string(),
    };
    wtr.write_record(["method", "best_mean", "best_std", "last_mean", "last_std"])
        .map_err(csv_err)?;
    for m in &methods {
        wtr.write_record([
            m.name.clone(),
            format!("{}", m.best_mean),
            format!("{}", m.best_std),
            format!("{}", m.last_mean),
            format!("{}", m.last_std),
        ])
        .map_err(csv_err)?;
    }
    let bytes = wtr.into_inner().map_err(|e| Error::Csv {
        line: 0,
        message: e.to_string(),
    })?;
    atomic_write(&summary_path, &bytes)?;

    Ok(CompareOutcome {
        methods,
        summary_path,
    })
}

/// Human-readable comparison table (best and last test accuracy).
pub fn render_summary(outcome: &CompareOutcome) -> String {
    let mut out = String::new();
    let name_w = outcome
        .methods
        .iter()
        .map(|m| m.name.len())
        .max()
        .unwrap_or(6)
        .max(6);
    let _ = writeln!(
        out,
        "{:name_w$}  {:>19}  {:>19}",
        "method", "best_acc", "last_acc"
    );
    for m in &outcome.methods {
        let _ = writeln!(
            out,
            "{:name_w$}  {:>8.4} \u{00b1} {:>8.4}  {:>8.4} \u{00b1} {:>8.4}",
            m.name, m.best_mean, m.best_std, m.last_mean, m.last_std
        );
    }
    out
}

/// Worst component error between two gradient vectors, normalized by the
/// gradient scale: max_k |a_k - b_k| / (max|a| + max|b| + 1e-12).
///
/// Per-component relative error is the wrong yardstick for long gradient
/// vectors: some components inevitably sit several orders of magnitude
/// below the gradient scale, where a central difference carries no
/// relative accuracy in f64 at any step size.
fn scaled_vec_err(a: &[f64], b: &[f64]) -> f64 {
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let scale = inf(a) + inf(b) + 1e-12;
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / scale)
        .fold(0.0f64, f64::max)
}

/// Max FD-vs-analytic relative error for one random learner instance.
///
/// The instance is a single sample with inputs bounded away from zero:
/// averaging signed per-sample terms can leave a gradient component near
/// zero, where a central difference has no relative accuracy left. Batch
/// averaging itself is covered by an exact linearity test, not by FD.
pub fn learner_fd_instance(arch: &Architecture, seed: u64) -> Result<f64> {
    let (d, classes) = match arch {
        Architecture::SoftmaxRegression { inputs, classes } => (*inputs, *classes),
        Architecture::Mlp {
            inputs, classes, ..
        } => (*inputs, *classes),
    };
    let mut rng = RngStream::named(seed, "fd-learner");
    let model = LearnerModel::init(arch.clone(), &mut rng);
    let mut inputs = DenseMatrix::zeros(1, d);
    for v in inputs.row_mut(0) {
        let mag = rng.uniform_in(0.7, 1.3);
        *v = if rng.uniform() < 0.5 { -mag } else { mag };
    }
    let labels = vec![(seed as usize) % classes];
    let batch = crate::models::MiniBatch { inputs, labels };
    gradient_check(&model, &batch, 1e-6)
}

/// Signed draw with magnitude in [lo, hi], bounded away from zero so no
/// gradient factor collapses below the finite-difference noise floor.
fn signed_in(rng: &mut RngStream, lo: f64, hi: f64) -> f64 {
    let mag = rng.uniform_in(lo, hi);
    if rng.uniform() < 0.5 { -mag } else { mag }
}

/// Max FD-vs-analytic relative error of d(alpha)/d(theta) for one random
/// (params, state, loss) triple.
pub fn meta_fd_instance(hidden: usize, seed: u64) -> Result<f64> {
    let mut rng = RngStream::named(seed, "fd-meta");
    let params = MLRSNetParams::init(hidden, 1.0, &mut rng)?;
    let state = MLRSNetState {
        h: (0..hidden).map(|_| signed_in(&mut rng, 0.15, 0.8)).collect(),
        c: (0..hidden).map(|_| signed_in(&mut rng, 0.2, 1.2)).collect(),
    };
    let loss = rng.uniform_in(0.05, 4.0);

    let (_, _, cache) = params.forward(&state, loss)?;
    let analytic = params.backward_theta(&state, &cache)?;

    let flat = params.to_flat();
    let mut probe = params.clone();
    let mut fd = vec![0.0; flat.len()];
    for k in 0..flat.len() {
        let h = 1e-6 * (1.0 + flat[k].abs());
        let pp = flat[k] + h;
        let pm = flat[k] - h;
        let mut shifted = flat.clone();
        shifted[k] = pp;
        probe.set_from_flat(&shifted)?;
        let (ap, _, _) = probe.forward(&state, loss)?;
        shifted[k] = pm;
        probe.set_from_flat(&shifted)?;
        let (am, _, _) = probe.forward(&state, loss)?;
        fd[k] = (ap - am) / (pp - pm);
    }
    Ok(scaled_vec_err(&analytic, &fd))
}

/// Max FD-vs-analytic relative error of the full hypergradient composition
/// theta -> alpha -> one-step lookahead -> validation loss, on a small
/// learner (< 50 parameters) with hidden size 5.
pub fn hyper_fd_instance(seed: u64) -> Result<f64> {
    let d = 2;
    let classes = 2;
    let arch = Architecture::SoftmaxRegression {
        inputs: d,
        classes,
    };
    let mut rng = RngStream::named(seed, "fd-hyper");
    let model = LearnerModel::init(arch, &mut rng);
    debug_assert!(model.num_params() <= 50);

    let hidden = 5;
    let theta = MLRSNetParams::init(hidden, 1.0, &mut rng)?;
    let state = MLRSNetState {
        h: (0..hidden).map(|_| signed_in(&mut rng, 0.15, 0.8)).collect(),
        c: (0..hidden).map(|_| signed_in(&mut rng, 0.2, 1.2)).collect(),
    };

    let make_batch = |rng: &mut RngStream| {
        let n = 12;
        let mut inputs = DenseMatrix::zeros(n, d);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % classes;
            let row = inputs.row_mut(i);
            for (j, v) in row.iter_mut().enumerate() {
                *v = 0.8 * rng.normal() + if j == c { 2.0 } else { 0.0 };
            }
            labels.push(c);
        }
        crate::models::MiniBatch { inputs, labels }
    };
    let train_batch = make_batch(&mut rng);
    let val_batch = make_batch(&mut rng);

    let vs = virtual_step(&model, &train_batch, &theta, &state, Normalizer::Identity)?;
    let (_, val_cache) = vs.w_hat.forward_loss(&val_batch)?;
    let g_val = vs.w_hat.backward(&val_cache)?;
    let dalpha = theta.backward_theta(&state, &vs.meta_cache)?;
    let analytic = hypergradient(&vs.g_train.to_flat(), &g_val.to_flat(), &dalpha)?;

    let flat = theta.to_flat();
    let mut probe = theta.clone();
    let mut fd = vec![0.0; flat.len()];
    for k in 0..flat.len() {
        let h = 1e-5 * (1.0 + flat[k].abs());
        let pp = flat[k] + h;
        let pm = flat[k] - h;
        let mut shifted = flat.clone();
        shifted[k] = pp;
        probe.set_from_flat(&shifted)?;
        let lp = virtual_step(&model, &train_batch, &probe, &state, Normalizer::Identity)?
            .w_hat
            .forward_loss(&val_batch)?
            .0;
        shifted[k] = pm;
        probe.set_from_flat(&shifted)?;
        let lm = virtual_step(&model, &train_batch, &probe, &state, Normalizer::Identity)?
            .w_hat
            .forward_loss(&val_batch)?
            .0;
        fd[k] = (lp - lm) / (pp - pm);
    }
    Ok(scaled_vec_err(&analytic, &fd))
}

/// Worst relative errors of the three finite-difference suites.
#[derive(Debug, Clone, Copy)]
pub struct GradcheckReport {
    pub learner_max_rel: f64,
    pub meta_max_rel: f64,
    pub hyper_max_rel: f64,
}

impl GradcheckReport {
    pub fn worst(&self) -> f64 {
        self.learner_max_rel
            .max(self.meta_max_rel)
            .max(self.hyper_max_rel)
    }
}

/// Runs a condensed version of every finite-difference suite.
pub fn gradcheck_all(seed: u64) -> Result<GradcheckReport> {
    let mut learner: f64 = 0.0;
    for s in 0..4 {
        learner = learner.max(learner_fd_instance(
            &Architecture::SoftmaxRegression {
                inputs: 6,
                classes: 3,
            },
            seed + s,
        )?);
        learner = learner.max(learner_fd_instance(
            &Architecture::Mlp {
                inputs: 6,
                hidden: vec![8],
                classes: 3,
            },
            seed + 100 + s,
        )?);
    }
    let mut meta: f64 = 0.0;
    for s in 0..4 {
        meta = meta.max(meta_fd_instance(5, seed + s)?);
        meta = meta.max(meta_fd_instance(8, seed + 100 + s)?);
    }
    let mut hyper: f64 = 0.0;
    for s in 0..2 {
        hyper = hyper.max(hyper_fd_instance(seed + s)?);
    }
    Ok(GradcheckReport {
        learner_max_rel: learner,
        meta_max_rel: meta,
        hyper_max_rel: hyper,
    })
}

/// Artifacts of one single-run command.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub metrics_path: PathBuf,
    pub checkpoint_paths: Vec<PathBuf>,
    pub final_test_acc: Option<f64>,
}

fn last_test_acc(records: &[TrainStepRecord]) -> Option<f64> {
    records
        .iter()
        .rev()
        .find(|r| r.phase == Phase::Eval)
        .and_then(|r| r.test_acc)
}

/// One meta-training run: metrics CSV, final checkpoint, optional per-epoch
/// checkpoints.
pub fn run_meta_experiment(cfg: &ExperimentConfig, seed: u64) -> Result<RunArtifacts> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let data = make_splits(&cfg.dataset)?;
    let mt = cfg.metatrain_config(seed);
    let mut records = Vec::new();
    let out = train_mlrsnet(&mt, &data, &cfg.model, None, &mut records)?;

    let metrics_path = cfg.output_dir.join(format!("meta-seed{seed}.csv"));
    write_metrics(&MetricsTable::new(records.clone()), &metrics_path)?;

    let meta = crate::mlrsnet::CheckpointMeta {
        step: mt.total_steps,
        seed,
        config_hash: cfg.config_hash(),
    };
    let mut checkpoint_paths = Vec::new();
    let final_path = cfg.output_dir.join(format!("meta-seed{seed}-final.json"));
    crate::mlrsnet::save_checkpoint(&out.theta, &meta, &final_path)?;
    checkpoint_paths.push(final_path);
    if cfg.save_epoch_checkpoints {
        for (i, snapshot) in out.checkpoints.iter().enumerate() {
            let epoch_meta = crate::mlrsnet::CheckpointMeta {
                step: (i as u64 + 1) * mt.steps_per_epoch,
                seed,
                config_hash: cfg.config_hash(),
            };
            let path = cfg
                .output_dir
                .join(format!("meta-seed{seed}-epoch{:03}.json", i + 1));
            crate::mlrsnet::save_checkpoint(snapshot, &epoch_meta, &path)?;
            checkpoint_paths.push(path);
        }
    }
    Ok(RunArtifacts {
        metrics_path,
        checkpoint_paths,
        final_test_acc: last_test_acc(&records),
    })
}

/// One baseline run driven by `cfg.schedule`.
pub fn run_baseline_experiment(cfg: &ExperimentConfig, seed: u64) -> Result<RunArtifacts> {
    cfg.validate()?;
    let schedule = cfg
        .schedule
        .as_ref()
        .ok_or_else(|| Error::Config("baseline run needs a schedule".into()))?;
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let data = make_splits(&cfg.dataset)?;
    let mt = cfg.metatrain_config(seed);
    let mut records = Vec::new();
    train_with_schedule(schedule, &mt, &data, &cfg.model, &mut records)?;
    let metrics_path = cfg.output_dir.join(format!("baseline-seed{seed}.csv"));
    write_metrics(&MetricsTable::new(records.clone()), &metrics_path)?;
    Ok(RunArtifacts {
        metrics_path,
        checkpoint_paths: Vec::new(),
        final_test_acc: last_test_acc(&records),
    })
}

/// One transfer run driven by `cfg.transfer`.
pub fn run_transfer_experiment(cfg: &ExperimentConfig, seed: u64) -> Result<RunArtifacts> {
    cfg.validate()?;
    let plan = cfg
        .transfer
        .as_ref()
        .ok_or_else(|| Error::Config("transfer run needs a transfer plan".into()))?;
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let data = make_splits(&cfg.dataset)?;
    let mt = cfg.metatrain_config(seed);
    let mut records = Vec::new();
    run_transfer(
        plan,
        &mt,
        &data,
        &cfg.model,
        cfg.reset_state_on_switch,
        &mut records,
    )?;
    let metrics_path = cfg.output_dir.join(format!("transfer-seed{seed}.csv"));
    write_metrics(&MetricsTable::new(records.clone()), &metrics_path)?;
    Ok(RunArtifacts {
        metrics_path,
        checkpoint_paths: Vec::new(),
        final_test_acc: last_test_acc(&records),
    })
}

#[derive(clap::Parser)]
#[command(
    name = "metasched",
    version,
    about = "Meta-learned learning-rate schedules for SGD"
)]
struct Cli {
    #[command(subcommand)]
    command: CliCommand,
}

#[derive(clap::Subcommand)]
enum CliCommand {
    /// Train the meta-net online alongside the learner, one run per seed.
    TrainMeta {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train with the config's classical `schedule`, one run per seed.
    TrainBaseline {
        #[arg(long)]
        config: PathBuf,
    },
    /// Re-train a fresh model under the config's frozen `transfer` plan.
    Transfer {
        #[arg(long)]
        config: PathBuf,
    },
    /// Finite-difference checks of every analytic gradient.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the config's methods x seeds grid and summarize test accuracy.
    Compare {
        #[arg(long)]
        config: PathBuf,
    },
    /// Project plotting columns out of a metrics CSV.
    EmitPlots {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn cli_main(cli: Cli) -> Result<()> {
    match cli.command {
        CliCommand::TrainMeta { config } => {
            let cfg = load_experiment_config(&config)?;
            for &seed in &cfg.seeds {
                let run = run_meta_experiment(&cfg, seed)?;
                println!(
                    "seed {seed}: metrics {} checkpoint {} test_acc {}",
                    run.metrics_path.display(),
                    run.checkpoint_paths[0].display(),
                    run.final_test_acc.map_or("-".into(), |a| format!("{a:.4}")),
                );
            }
        }
        CliCommand::TrainBaseline { config } => {
            let cfg = load_experiment_config(&config)?;
            for &seed in &cfg.seeds {
                let run = run_baseline_experiment(&cfg, seed)?;
                println!(
                    "seed {seed}: metrics {} test_acc {}",
                    run.metrics_path.display(),
                    run.final_test_acc.map_or("-".into(), |a| format!("{a:.4}")),
                );
            }
        }
        CliCommand::Transfer { config } => {
            let cfg = load_experiment_config(&config)?;
            for &seed in &cfg.seeds {
                let run = run_transfer_experiment(&cfg, seed)?;
                println!(
                    "seed {seed}: metrics {} test_acc {}",
                    run.metrics_path.display(),
                    run.final_test_acc.map_or("-".into(), |a| format!("{a:.4}")),
                );
            }
        }
        CliCommand::Gradcheck { seed } => {
            let report = gradcheck_all(seed)?;
            println!("learner max rel err: {:e}", report.learner_max_rel);
            println!("meta-net max rel err: {:e}", report.meta_max_rel);
            println!("hypergradient max rel err: {:e}", report.hyper_max_rel);
            if report.worst() > 1e-5 {
                return Err(Error::Domain(format!(
                    "gradient check exceeded 1e-5: worst {:e}",
                    report.worst()
                )));
            }
        }
        CliCommand::Compare { config } => {
            let cfg = load_experiment_config(&config)?;
            let outcome = run_compare(&cfg)?;
            print!("{}", render_summary(&outcome));
            println!("summary: {}", outcome.summary_path.display());
        }
        CliCommand::EmitPlots { metrics, out } => {
            let table = read_metrics(&metrics)?;
            emit_plots(&table, &out)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

/// Parses and runs one CLI invocation; returns the process exit code
/// (0 success, 1 runtime failure, 2 usage error).
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    use clap::Parser as _;
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match cli_main(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
