//! Checkpoint transfer: pick k per-epoch meta-net snapshots from a finished
//! meta run, split a new training horizon into k equal segments, and drive
//! the new run with the frozen nets swapped at the boundaries while the
//! recurrent state carries across.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metatrain::{train_with_runtime, MetaTrainConfig, TrainStepRecord};
use crate::models::{Architecture, DataSplits, LearnerModel};
use crate::schedules::{FrozenMetaRuntime, ScheduleContext, ScheduleSpec, SchedulerRuntime};

/// A segmented frozen-meta-net run: checkpoint l drives steps
/// [boundaries[l], boundaries[l+1]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferPlan {
    pub checkpoints: Vec<PathBuf>,
    /// k+1 step indices, strictly increasing from 0 to target_total_steps.
    pub boundaries: Vec<u64>,
    pub target_total_steps: u64,
    #[serde(default)]
    pub gamma_override: Option<f64>,
}

impl TransferPlan {
    pub fn validate(&self) -> Result<()> {
        let k = self.checkpoints.len();
        if k == 0 {
            return Err(Error::Config("transfer plan needs at least one checkpoint".into()));
        }
        if self.boundaries.len() != k + 1 {
            return Err(Error::Config(format!(
                "expected {} boundaries for {} checkpoints, got {}",
                k + 1,
                k,
                self.boundaries.len()
            )));
        }
        if self.boundaries[0] != 0 || *self.boundaries.last().unwrap() != self.target_total_steps {
            return Err(Error::Config(
                "boundaries must run from 0 to target_total_steps".into(),
            ));
        }
        if self.boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("boundaries must be strictly increasing".into()));
        }
        if let Some(g) = self.gamma_override {
            if !(g > 0.0) || !g.is_finite() {
                return Err(Error::Config(format!(
                    "gamma_override must be positive, got {g}"
                )));
            }
        }
        Ok(())
    }
}

/// Epochs (1-based) at which to lift checkpoints from a run of `num_epochs`
/// epochs: round(E*l/(k-1)) for l = 0..k, the l=0 entry mapped to epoch 1 so
/// an untrained net is never selected, duplicates collapsed upward.
pub fn select_checkpoint_epochs(num_epochs: usize, k: usize) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 checkpoints, got {k}")));
    }
    if k > num_epochs {
        return Err(Error::Config(format!(
            "cannot select {k} checkpoints from {num_epochs} epochs"
        )));
    }
    let e = num_epochs as f64;
    let mut epochs = Vec::with_capacity(k);
    for l in 0..k {
        let raw = (e * l as f64 / (k - 1) as f64).round() as usize;
        let mut epoch = raw.max(1);
        if let Some(&prev) = epochs.last() {
            if epoch <= prev {
                epoch = prev + 1;
            }
        }
        epochs.push(epoch);
    }
    debug_assert!(epochs.last().copied().unwrap_or(0) <= num_epochs);
    Ok(epochs)
}

/// Picks k snapshots out of a per-epoch checkpoint list (index i holds the
/// post-epoch-(i+1) snapshot).
pub fn select_checkpoints<T: Clone>(run_checkpoints: &[T], k: usize) -> Result<Vec<T>> {
    let epochs = select_checkpoint_epochs(run_checkpoints.len(), k)?;
    Ok(epochs.iter().map(|e| run_checkpoints[e - 1].clone()).collect())
}

/// Equal segmentation of the target horizon: boundary b_l = round(total*l/k).
pub fn build_transfer_plan(
    checkpoints: Vec<PathBuf>,
    target_total_steps: u64,
    gamma_override: Option<f64>,
) -> Result<TransferPlan> {
    let k = checkpoints.len() as u64;
    if k == 0 {
        return Err(Error::Config("transfer plan needs at least one checkpoint".into()));
    }
    if target_total_steps < k {
        return Err(Error::Config(format!(
            "target horizon {target_total_steps} is shorter than {k} segments"
        )));
    }
    let boundaries = (0..=k)
        .map(|l| ((target_total_steps as f64) * (l as f64) / (k as f64)).round() as u64)
        .collect();
    let plan = TransferPlan {
        checkpoints,
        boundaries,
        target_total_steps,
        gamma_override,
    };
    plan.validate()?;
    Ok(plan)
}

/// Trains a fresh model over the plan's horizon with the frozen nets. The
/// config's total_steps is taken from the plan; recurrent state is carried
/// across boundaries unless `reset_state_on_switch` asks otherwise.
pub fn run_transfer(
    plan: &TransferPlan,
    cfg: &MetaTrainConfig,
    data: &DataSplits,
    arch: &Architecture,
    reset_state_on_switch: bool,
    records: &mut Vec<TrainStepRecord>,
) -> Result<LearnerModel> {
    plan.validate()?;
    let mut cfg = cfg.clone();
    cfg.total_steps = plan.target_total_steps;
    let ctx = ScheduleContext {
        steps_per_epoch: cfg.steps_per_epoch,
        normalizer: cfg.normalizer,
        reset_state_on_switch,
    };
    let starts = plan.boundaries[..plan.checkpoints.len()].to_vec();
    let frozen =
        FrozenMetaRuntime::from_paths(&plan.checkpoints, plan.gamma_override, starts, &ctx)?;
    let spec = ScheduleSpec::FrozenMetaNet {
        checkpoints: plan.checkpoints.clone(),
        gamma_override: plan.gamma_override,
    };
    let mut runtime = SchedulerRuntime::FrozenMeta(frozen);
    train_with_runtime(&spec, &mut runtime, &cfg, data, arch, records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metatrain::Phase;
    use crate::mlrsnet::{save_checkpoint, CheckpointMeta, MLRSNetParams};
    use crate::models::Dataset;
    use crate::numcore::{DenseMatrix, RngStream};

    #[test]
    fn epoch_selection_examples() {
        assert_eq!(select_checkpoint_epochs(200, 3).unwrap(), vec![1, 100, 200]);
        assert_eq!(select_checkpoint_epochs(10, 2).unwrap(), vec![1, 10]);
        assert_eq!(select_checkpoint_epochs(9, 4).unwrap(), vec![1, 3, 6, 9]);
    }

    #[test]
    fn epoch_selection_is_strictly_increasing_and_bounded() {
        for e in 2..=60 {
            for k in 2..=e {
                let epochs = select_checkpoint_epochs(e, k).unwrap();
                assert_eq!(epochs.len(), k);
                assert!(epochs.windows(2).all(|w| w[0] < w[1]), "E={e} k={k}: {epochs:?}");
                assert!(*epochs.first().unwrap() >= 1);
                assert!(*epochs.last().unwrap() <= e, "E={e} k={k}: {epochs:?}");
            }
        }
    }

    #[test]
    fn epoch_selection_rejects_bad_k() {
        assert!(matches!(select_checkpoint_epochs(10, 1), Err(Error::Config(_))));
        assert!(matches!(select_checkpoint_epochs(10, 11), Err(Error::Config(_))));
    }

    #[test]
    fn selection_maps_epochs_to_indices() {
        let snapshots: Vec<u32> = (1..=10).collect();
        // Epochs {1, 10} hold values 1 and 10.
        assert_eq!(select_checkpoints(&snapshots, 2).unwrap(), vec![1, 10]);
        let nine: Vec<u32> = (1..=9).collect();
        assert_eq!(select_checkpoints(&nine, 4).unwrap(), vec![1, 3, 6, 9]);
    }

    #[test]
    fn plan_boundaries_examples() {
        let paths = |k: usize| -> Vec<PathBuf> {
            (0..k).map(|i| PathBuf::from(format!("cp{i}.json"))).collect()
        };
        let p = build_transfer_plan(paths(3), 100, None).unwrap();
        assert_eq!(p.boundaries, vec![0, 33, 67, 100]);
        let p = build_transfer_plan(paths(3), 1200, None).unwrap();
        assert_eq!(p.boundaries, vec![0, 400, 800, 1200]);
        let p = build_transfer_plan(paths(1), 57, None).unwrap();
        assert_eq!(p.boundaries, vec![0, 57]);
    }

    #[test]
    fn plan_boundaries_partition_the_horizon() {
        for total in [10u64, 57, 100, 997] {
            for k in 1..=7usize {
                if (total as usize) < k {
                    continue;
                }
                let paths = (0..k).map(|i| PathBuf::from(format!("c{i}"))).collect();
                let plan = build_transfer_plan(paths, total, None).unwrap();
                let b = &plan.boundaries;
                assert_eq!(b[0], 0);
                assert_eq!(*b.last().unwrap(), total);
                // No gap, no overlap: segment lengths sum to the horizon.
                let sum: u64 = b.windows(2).map(|w| w[1] - w[0]).sum();
                assert_eq!(sum, total);
                assert!(b.windows(2).all(|w| w[0] < w[1]));
            }
        }
    }

    #[test]
    fn invalid_plans_rejected() {
        assert!(build_transfer_plan(vec![], 100, None).is_err());
        assert!(build_transfer_plan(vec![PathBuf::from("a"), PathBuf::from("b")], 1, None).is_err());
        let mut plan = build_transfer_plan(vec![PathBuf::from("a")], 10, None).unwrap();
        plan.boundaries = vec![0, 4, 10];
        assert!(plan.validate().is_err());
        plan.boundaries = vec![1, 10];
        assert!(plan.validate().is_err());
        plan.boundaries = vec![0, 9];
        assert!(plan.validate().is_err());
        plan.boundaries = vec![0, 10];
        plan.gamma_override = Some(-1.0);
        assert!(plan.validate().is_err());
    }

    #[test]
    fn plan_round_trips_through_json() {
        let plan = build_transfer_plan(
            vec![PathBuf::from("a.json"), PathBuf::from("b.json")],
            64,
            Some(0.1),
        )
        .unwrap();
        let text = serde_json::to_string(&plan).unwrap();
        let back: TransferPlan = serde_json::from_str(&text).unwrap();
        assert_eq!(back, plan);
        // gamma_override may be omitted entirely.
        let sparse: TransferPlan = serde_json::from_str(
            r#"{"checkpoints":["a.json"],"boundaries":[0,5],"target_total_steps":5}"#,
        )
        .unwrap();
        assert_eq!(sparse.gamma_override, None);
    }

    fn blob_splits(d: usize, classes: usize, n: usize, seed: u64, sigma: f64) -> DataSplits {
        let make = |label: &str, n: usize| {
            let mut rng = RngStream::named(seed, label);
            let mut inputs = DenseMatrix::zeros(n, d);
            let mut labels = Vec::with_capacity(n);
            for i in 0..n {
                let c = i % classes;
                let row = inputs.row_mut(i);
                for (j, v) in row.iter_mut().enumerate() {
                    *v = sigma * rng.normal() + if j == c % d { 2.0 } else { 0.0 };
                }
                labels.push(c);
            }
            Dataset {
                inputs,
                labels,
                classes,
            }
        };
        DataSplits {
            train: make("train", n),
            val: make("val", n / 2),
            test: make("test", n / 2),
        }
    }

    fn save_params(dir: &std::path::Path, name: &str, params: &MLRSNetParams) -> PathBuf {
        let path = dir.join(name);
        let meta = CheckpointMeta {
            step: 0,
            seed: 0,
            config_hash: String::new(),
        };
        save_checkpoint(params, &meta, &path).unwrap();
        path
    }

    fn transfer_cfg(seed: u64) -> MetaTrainConfig {
        MetaTrainConfig {
            total_steps: 24,
            steps_per_epoch: 4,
            train_batch: 16,
            val_batch: 16,
            hidden_size: 6,
            seed,
            weight_decay: 0.0,
            ..MetaTrainConfig::default()
        }
    }

    #[test]
    fn identical_checkpoints_match_single_checkpoint_run() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = RngStream::new(7);
        let params = MLRSNetParams::init(6, 1.0, &mut rng).unwrap();
        let p1 = save_params(dir.path(), "a.json", &params);
        let p2 = save_params(dir.path(), "b.json", &params);
        let p3 = save_params(dir.path(), "c.json", &params);

        let data = blob_splits(4, 2, 64, 301, 0.6);
        let arch = Architecture::SoftmaxRegression {
            inputs: 4,
            classes: 2,
        };
        let cfg = transfer_cfg(31);

        let single = build_transfer_plan(vec![p1.clone()], 24, None).unwrap();
        let triple = build_transfer_plan(vec![p1, p2, p3], 24, None).unwrap();

        let mut r_single = Vec::new();
        let m_single = run_transfer(&single, &cfg, &data, &arch, false, &mut r_single).unwrap();
        let mut r_triple = Vec::new();
        let m_triple = run_transfer(&triple, &cfg, &data, &arch, false, &mut r_triple).unwrap();

        assert_eq!(r_single, r_triple);
        let a = m_single.flat_params();
        let b = m_triple.flat_params();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn distinct_checkpoints_change_the_lr_trace_at_the_boundary() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = RngStream::new(8);
        let a = MLRSNetParams::init(6, 1.0, &mut rng).unwrap();
        let b = MLRSNetParams::init(6, 1.0, &mut rng).unwrap();
        let pa = save_params(dir.path(), "a.json", &a);
        let pb = save_params(dir.path(), "b.json", &b);

        let data = blob_splits(4, 2, 64, 302, 0.6);
        let arch = Architecture::SoftmaxRegression {
            inputs: 4,
            classes: 2,
        };
        let cfg = transfer_cfg(32);

        let plan_ab = build_transfer_plan(vec![pa.clone(), pb], 24, None).unwrap();
        let plan_aa = build_transfer_plan(vec![pa.clone(), pa], 24, None).unwrap();
        assert_eq!(plan_ab.boundaries, vec![0, 12, 24]);

        let mut r_ab = Vec::new();
        run_transfer(&plan_ab, &cfg, &data, &arch, false, &mut r_ab).unwrap();
        let mut r_aa = Vec::new();
        run_transfer(&plan_aa, &cfg, &data, &arch, false, &mut r_aa).unwrap();

        let lr = |rs: &[TrainStepRecord], step: u64| {
            rs.iter()
                .find(|r| r.phase == Phase::Train && r.step == step)
                .unwrap()
                .lr
                .unwrap()
        };
        // Identical before the switch, different at it.
        for s in 0..12 {
            assert_eq!(lr(&r_ab, s).to_bits(), lr(&r_aa, s).to_bits(), "step {s}");
        }
        assert_ne!(lr(&r_ab, 12), lr(&r_aa, 12));
    }

    #[test]
    fn gamma_override_caps_the_emitted_lr() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = RngStream::new(9);
        let params = MLRSNetParams::init(6, 10.0, &mut rng).unwrap();
        let p = save_params(dir.path(), "a.json", &params);

        let data = blob_splits(4, 2, 64, 303, 0.6);
        let arch = Architecture::SoftmaxRegression {
            inputs: 4,
            classes: 2,
        };
        let cfg = transfer_cfg(33);
        let plan = build_transfer_plan(vec![p], 24, Some(0.1)).unwrap();
        let mut records = Vec::new();
        run_transfer(&plan, &cfg, &data, &arch, false, &mut records).unwrap();
        for r in records.iter().filter(|r| r.phase == Phase::Train) {
            let lr = r.lr.unwrap();
            assert!(lr > 0.0 && lr < 0.1, "lr {lr} escaped (0, 0.1)");
        }
    }

    #[test]
    fn transfer_converges_across_batch_sizes() {
        // Meta-train on small blobs, lift checkpoints, re-train at two
        // different batch sizes; both runs must at least halve the loss.
        let data = blob_splits(6, 2, 128, 304, 0.4);
        let arch = Architecture::SoftmaxRegression {
            inputs: 6,
            classes: 2,
        };
        let meta_cfg = MetaTrainConfig {
            total_steps: 40,
            steps_per_epoch: 4,
            t_val: 2,
            train_batch: 32,
            val_batch: 32,
            hidden_size: 6,
            seed: 41,
            weight_decay: 0.0,
            ..MetaTrainConfig::default()
        };
        let mut sink = Vec::new();
        let out = crate::metatrain::train_mlrsnet(&meta_cfg, &data, &arch, None, &mut sink).unwrap();
        assert_eq!(out.checkpoints.len(), 10);
        let picked = select_checkpoints(&out.checkpoints, 3).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let paths: Vec<PathBuf> = picked
            .iter()
            .enumerate()
            .map(|(i, p)| save_params(dir.path(), &format!("cp{i}.json"), p))
            .collect();

        for batch in [8usize, 64] {
            let cfg = MetaTrainConfig {
                train_batch: batch,
                seed: 42,
                ..transfer_cfg(42)
            };
            let plan = build_transfer_plan(paths.clone(), 48, None).unwrap();
            let mut records = Vec::new();
            run_transfer(&plan, &cfg, &data, &arch, false, &mut records).unwrap();
            let train: Vec<f64> = records
                .iter()
                .filter(|r| r.phase == Phase::Train)
                .map(|r| r.train_loss.unwrap())
                .collect();
            let first = *train.first().unwrap();
            let last = *train.last().unwrap();
            assert!(last < 0.5 * first, "batch {batch}: {last} vs {first}");
        }
    }

    #[test]
    fn state_reset_flag_changes_the_post_switch_trace() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = RngStream::new(10);
        let a = MLRSNetParams::init(6, 1.0, &mut rng).unwrap();
        let b = MLRSNetParams::init(6, 1.0, &mut rng).unwrap();
        let pa = save_params(dir.path(), "a.json", &a);
        let pb = save_params(dir.path(), "b.json", &b);

        let data = blob_splits(4, 2, 64, 305, 0.6);
        let arch = Architecture::SoftmaxRegression {
            inputs: 4,
            classes: 2,
        };
        let cfg = transfer_cfg(34);
        let plan = build_transfer_plan(vec![pa, pb], 24, None).unwrap();

        let mut carried = Vec::new();
        run_transfer(&plan, &cfg, &data, &arch, false, &mut carried).unwrap();
        let mut reset = Vec::new();
        run_transfer(&plan, &cfg, &data, &arch, true, &mut reset).unwrap();

        let lr_at_step = |rs: &[TrainStepRecord], step: u64| {
            rs.iter()
                .find(|r| r.phase == Phase::Train && r.step == step)
                .unwrap()
                .lr
                .unwrap()
        };
        for s in 0..12 {
            assert_eq!(
                lr_at_step(&carried, s).to_bits(),
                lr_at_step(&reset, s).to_bits()
            );
        }
        assert_ne!(lr_at_step(&carried, 12), lr_at_step(&reset, 12));
    }
}
