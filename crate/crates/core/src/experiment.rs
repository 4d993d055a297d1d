//! End-to-end experiment driver: data preparation, repeated seeded runs and
//! result collection.

use std::path::Path;
use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::attacks::{AttackKind, AttackRecord, Schedule};
use crate::config::{ExperimentConfig, PartitionMode};
use crate::defense::DefenseKind;
use crate::error::{Error, Result};
use crate::fedsim::{
    apply_dynamics, assign_adversaries, draw_noniid, partition_iid, pretrain, run_round, NetworkState, RoundRecord,
    SimParams,
};
use crate::metrics::{confusion_matrix, false_positive_stats, mean, Detection, FpStats};
use crate::neural::{init_model, write_checkpoint, ArchSpec, Init, ModelParams};
use crate::rng::{stream, Domain};
use crate::sigsyn::{build_dataset, LabeledDataset};
use crate::theory::TheoryReport;

/// Data of one seeded run before any training.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub shards: Vec<LabeledDataset>,
    pub reserve: LabeledDataset,
    pub test: LabeledDataset,
    /// Samples held back for entering devices.
    pub spare: LabeledDataset,
    pub adversary: Vec<bool>,
}

/// Builds the dataset, splits off test and reserve sets, partitions the rest
/// among devices and draws adversarial roles.
pub fn prepare_data(cfg: &ExperimentConfig, seed: u64) -> Result<PreparedData> {
    let ds = &cfg.dataset;
    let full = build_dataset(
        &ds.schemes,
        ds.per_class,
        &ds.snr_db,
        ds.length,
        ds.channel,
        &mut stream(seed, Domain::Dataset, 0),
    )?;
    let mut split_rng = stream(seed, Domain::Split, 0);
    let mut order: Vec<usize> = (0..full.len()).collect();
    order.shuffle(&mut split_rng);
    let n_test = ((full.len() as f64) * ds.test_fraction).round() as usize;
    let test = full.subset(&sorted(&order[..n_test]));
    let train_idx = &order[n_test..];

    // reserve: `size` samples drawn from `labels` randomly chosen classes
    let classes: Vec<usize> = (0..full.class_count).collect();
    let reserve_classes: Vec<usize> = classes
        .choose_multiple(&mut split_rng, cfg.reserve_labels())
        .copied()
        .collect();
    let candidates: Vec<usize> = train_idx
        .iter()
        .copied()
        .filter(|&i| reserve_classes.contains(&full.samples[i].label))
        .collect();
    let size = cfg.reserve_size();
    if candidates.len() < size {
        return Err(Error::InsufficientData(format!(
            "reserve needs {size} samples but its classes hold {}",
            candidates.len()
        )));
    }
    let reserve_idx: Vec<usize> = candidates.choose_multiple(&mut split_rng, size).copied().collect();
    let reserve = full.subset(&sorted(&reserve_idx));
    let mut pool_idx: Vec<usize> = train_idx.iter().copied().filter(|i| !reserve_idx.contains(i)).collect();

    let mut part_rng = stream(seed, Domain::Partition, 0);
    let mut spare = LabeledDataset::empty(full.class_count);
    if let Some(d) = &cfg.dynamics {
        pool_idx.shuffle(&mut part_rng);
        let n_spare = (pool_idx.len() as f64 * d.spare_fraction).round() as usize;
        spare = full.subset(&sorted(&pool_idx[..n_spare]));
        pool_idx.drain(..n_spare);
    }
    let pool = full.subset(&sorted(&pool_idx));
    let shards = match cfg.partition.mode {
        PartitionMode::Iid => partition_iid(&pool, cfg.devices, &mut part_rng)?,
        PartitionMode::NonIid => {
            let (shards, rest) = draw_noniid(&pool, cfg.devices, cfg.partition.noniid_spec(), &mut part_rng)?;
            if cfg.dynamics.is_some() {
                spare.extend(rest);
            }
            shards
        }
    };
    let adversary = assign_adversaries(cfg.devices, cfg.adversary_fraction, &mut stream(seed, Domain::Roles, 0))?;
    Ok(PreparedData {
        shards,
        reserve,
        test,
        spare,
        adversary,
    })
}

fn sorted(idx: &[usize]) -> Vec<usize> {
    let mut v = idx.to_vec();
    v.sort_unstable();
    v
}

pub fn arch_for(cfg: &ExperimentConfig) -> ArchSpec {
    ArchSpec::mlp(cfg.dataset.length, cfg.model.hidden.clone(), cfg.classes())
}

pub fn initial_model(cfg: &ExperimentConfig, seed: u64) -> Result<ModelParams> {
    let init = cfg.model.init_std.map_or(Init::He, Init::Normal);
    init_model(arch_for(cfg), init, &mut stream(seed, Domain::Init, 0))
}

pub fn sim_params(cfg: &ExperimentConfig, seed: u64) -> SimParams {
    SimParams {
        lr: cfg.training.lr,
        batch_size: cfg.training.batch_size,
        local_epochs: cfg.training.local_epochs,
        alpha_adv: cfg.training.alpha_adv,
        attack: cfg.attack_spec(),
        defense: cfg.defense_config(),
        dynamics: cfg.dynamics_spec(),
        seed,
        keep_params: false,
    }
}

/// The same experiment without attacks or defense.
pub fn unperturbed(cfg: &ExperimentConfig) -> ExperimentConfig {
    let mut twin = cfg.clone();
    twin.attack.kind = AttackKind::None;
    twin.attack.schedule = Schedule::Fixed;
    twin.defense.kind = DefenseKind::None;
    twin.twin = false;
    twin
}

/// Everything recorded for one seed.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub seed: u64,
    pub records: Vec<RoundRecord>,
    pub final_params: ModelParams,
    pub final_accuracy: f64,
    pub confusion: Vec<Vec<usize>>,
    pub adversaries: Vec<usize>,
    pub fp: FpStats,
    /// Mean test accuracy over rounds at or after t₀.
    pub post_t0_accuracy: f64,
    /// Per-round test accuracy of the unperturbed twin.
    pub twin_accuracy: Option<Vec<f64>>,
    pub runtime_secs: f64,
}

impl RunResult {
    pub fn test_curve(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.test_acc.unwrap_or(f64::NAN)).collect()
    }

    pub fn detections(&self) -> Vec<Detection> {
        self.records.iter().map(detection).collect()
    }

    pub fn attack_log(&self) -> Vec<AttackRecord> {
        self.records.iter().flat_map(|r| r.attacks.iter().cloned()).collect()
    }
}

fn detection(r: &RoundRecord) -> Detection {
    Detection {
        round: r.round,
        devices: r.device_ids.clone(),
        perceived: r.perceived.clone(),
    }
}

/// Runs one seed of the experiment. `checkpoint_dir` receives parameter
/// snapshots when `checkpoint_every` is set.
pub fn run_single(cfg: &ExperimentConfig, seed: u64, checkpoint_dir: Option<&Path>) -> Result<RunResult> {
    let start = Instant::now();
    let data = prepare_data(cfg, seed)?;
    let mut global = initial_model(cfg, seed)?;
    if cfg.training.pretrain {
        global = pretrain(
            &global,
            &data.reserve,
            cfg.training.lr,
            cfg.training.batch_size,
            &mut stream(seed, Domain::Pretrain, 0),
        )?;
    }
    let sim = sim_params(cfg, seed);
    let mut state = NetworkState::new(data.shards, &data.adversary, data.reserve, data.spare, global, &sim)?;
    let adversaries = state.adversary_ids();
    let mut records = Vec::with_capacity(cfg.rounds);
    for t in 0..cfg.rounds {
        if t > 0 {
            let mut rng = stream(seed, Domain::Dynamics, t as u64);
            apply_dynamics(&mut state, t, sim.dynamics.as_ref(), &sim, &mut rng)?;
        }
        records.push(run_round(&mut state, &sim, Some(&data.test))?);
        if let (Some(every), Some(dir)) = (cfg.checkpoint_every, checkpoint_dir) {
            if (t + 1) % every == 0 {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                write_checkpoint(&state.global, &dir.join(format!("seed{seed}_round{:04}.ckpt", t + 1)))?;
            }
        }
    }
    let final_params = state.global;
    let confusion = confusion_matrix(&final_params, &data.test)?;
    let final_accuracy = records.last().and_then(|r| r.test_acc).unwrap_or(f64::NAN);
    let after: Vec<Detection> = records.iter().filter(|r| r.round >= cfg.t0).map(detection).collect();
    let fp = false_positive_stats(&after, &adversaries, cfg.fp_window);
    let post: Vec<f64> = records
        .iter()
        .filter(|r| r.round >= cfg.t0)
        .filter_map(|r| r.test_acc)
        .collect();
    let post_t0_accuracy = if post.is_empty() { final_accuracy } else { mean(&post) };
    let twin_accuracy = if cfg.twin {
        let twin = run_single(&unperturbed(cfg), seed, None)?;
        Some(twin.test_curve())
    } else {
        None
    };
    Ok(RunResult {
        seed,
        records,
        final_params,
        final_accuracy,
        confusion,
        adversaries,
        fp,
        post_t0_accuracy,
        twin_accuracy,
        runtime_secs: start.elapsed().as_secs_f64(),
    })
}

/// Seed-averaged headline numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: String,
    pub name: Option<String>,
    pub n_runs: usize,
    pub seeds: Vec<u64>,
    pub final_accuracy: f64,
    pub final_accuracy_per_seed: Vec<f64>,
    pub post_t0_accuracy: f64,
    pub twin_final_accuracy: Option<f64>,
    pub fp_nominal: f64,
    pub fp_rate: f64,
    pub all_filtered_rounds: usize,
    pub attack_fallbacks: usize,
    pub runtime_secs: f64,
}

pub const SCHEMA_VERSION: &str = "1.0.0";

#[derive(Debug, Clone)]
pub struct ResultsBundle {
    pub config: ExperimentConfig,
    pub runs: Vec<RunResult>,
    pub theory: Option<TheoryReport>,
    pub runtime_secs: f64,
}

impl ResultsBundle {
    pub fn n_runs(&self) -> usize {
        self.runs.len()
    }

    pub fn final_accuracy(&self) -> f64 {
        mean(&self.runs.iter().map(|r| r.final_accuracy).collect::<Vec<_>>())
    }

    pub fn post_t0_accuracy(&self) -> f64 {
        mean(&self.runs.iter().map(|r| r.post_t0_accuracy).collect::<Vec<_>>())
    }

    pub fn fp_rate(&self) -> f64 {
        mean(&self.runs.iter().map(|r| r.fp.rate).collect::<Vec<_>>())
    }

    pub fn summary(&self) -> Summary {
        let twin: Vec<f64> = self
            .runs
            .iter()
            .filter_map(|r| r.twin_accuracy.as_ref().and_then(|c| c.last().copied()))
            .collect();
        Summary {
            schema_version: SCHEMA_VERSION.to_string(),
            name: self.config.name.clone(),
            n_runs: self.runs.len(),
            seeds: self.runs.iter().map(|r| r.seed).collect(),
            final_accuracy: self.final_accuracy(),
            final_accuracy_per_seed: self.runs.iter().map(|r| r.final_accuracy).collect(),
            post_t0_accuracy: self.post_t0_accuracy(),
            twin_final_accuracy: (!twin.is_empty()).then(|| mean(&twin)),
            fp_nominal: mean(&self.runs.iter().map(|r| r.fp.nominal).collect::<Vec<_>>()),
            fp_rate: self.fp_rate(),
            all_filtered_rounds: self
                .runs
                .iter()
                .flat_map(|r| &r.records)
                .filter(|r| r.all_filtered)
                .count(),
            attack_fallbacks: self
                .runs
                .iter()
                .flat_map(|r| &r.records)
                .flat_map(|r| &r.attacks)
                .map(|a| a.fallback_count)
                .sum(),
            runtime_secs: self.runtime_secs,
        }
    }
}

/// Runs every configured seed.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ResultsBundle> {
    cfg.validate()?;
    let start = Instant::now();
    let ckpt = cfg.output_dir.as_ref().map(|d| d.join("checkpoints"));
    let runs = cfg
        .seed_list()
        .into_iter()
        .map(|s| run_single(cfg, s, ckpt.as_deref()))
        .collect::<Result<Vec<_>>>()?;
    Ok(ResultsBundle {
        config: cfg.clone(),
        runs,
        theory: None,
        runtime_secs: start.elapsed().as_secs_f64(),
    })
}
