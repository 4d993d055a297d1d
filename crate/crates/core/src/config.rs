//! Experiment configuration: a single JSON document with defaults for every
//! field and strict key checking.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::attacks::{AttackKind, AttackSpec, Schedule};
use crate::defense::{DefenseConfig, DefenseKind, LogBase, PenaltyCoeffs};
use crate::error::{Error, Result};
use crate::fedsim::{Dynamics, NonIidSpec};
use crate::sigsyn::{Channel, Modulation, MIN_LENGTH};

/// Paper-scale reserve: 500 samples out of 120 000 training signals.
const RESERVE_SHARE: f64 = 500.0 / 120_000.0;
const MIN_RESERVE: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: Option<String>,
    pub dataset: DatasetConfig,
    pub partition: PartitionConfig,
    /// Number of devices K.
    pub devices: usize,
    pub adversary_fraction: f64,
    /// First round in which adversaries poison their data.
    pub t0: usize,
    pub rounds: usize,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub attack: AttackConfig,
    pub defense: DefenseSettings,
    pub knowledge: Knowledge,
    pub reserve: ReserveConfig,
    pub dynamics: Option<DynamicsConfig>,
    pub seed: u64,
    /// Explicit seed list; overrides `seed` and `n_runs`.
    pub seeds: Option<Vec<u64>>,
    /// Number of consecutive seeds starting at `seed`.
    pub n_runs: usize,
    /// Also run an unperturbed, undefended twin per seed.
    pub twin: bool,
    /// Sampling period (rounds) for false-positive statistics.
    pub fp_window: usize,
    /// Write a parameter checkpoint every this many rounds.
    pub checkpoint_every: Option<usize>,
    pub theory: TheoryConfig,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: None,
            dataset: DatasetConfig::default(),
            partition: PartitionConfig::default(),
            devices: 10,
            adversary_fraction: 0.3,
            t0: 25,
            rounds: 100,
            model: ModelConfig::default(),
            training: TrainingConfig::default(),
            attack: AttackConfig::default(),
            defense: DefenseSettings::default(),
            knowledge: Knowledge::All,
            reserve: ReserveConfig::default(),
            dynamics: None,
            seed: 1,
            seeds: None,
            n_runs: 1,
            twin: false,
            fp_window: 5,
            checkpoint_every: None,
            theory: TheoryConfig::default(),
            output_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub schemes: Vec<Modulation>,
    /// Samples per (scheme, SNR) pair.
    pub per_class: usize,
    pub snr_db: Vec<f64>,
    pub length: usize,
    pub channel: Channel,
    pub test_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            schemes: Modulation::ALL.to_vec(),
            per_class: 400,
            snr_db: vec![8.0, 10.0],
            length: 32,
            channel: Channel::Rayleigh,
            test_fraction: 0.25,
        }
    }
}

impl DatasetConfig {
    pub fn classes(&self) -> usize {
        self.schemes.len()
    }

    pub fn total(&self) -> usize {
        self.per_class * self.schemes.len() * self.snr_db.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    #[default]
    Iid,
    NonIid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub mode: PartitionMode,
    pub labels_per_device: usize,
    pub qty_mean: f64,
    pub qty_std: f64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            mode: PartitionMode::Iid,
            labels_per_device: 5,
            qty_mean: 450.0,
            qty_std: 4.5,
        }
    }
}

impl PartitionConfig {
    pub fn noniid_spec(&self) -> NonIidSpec {
        NonIidSpec {
            labels_per_device: self.labels_per_device,
            qty_mean: self.qty_mean,
            qty_std: self.qty_std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    /// Fixed weight std; He scaling when absent.
    pub init_std: Option<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64],
            init_std: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    /// Scaling applied by adversaries to their transmitted parameters.
    pub alpha_adv: f64,
    /// One server epoch on the reserve set before round 0.
    pub pretrain: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            batch_size: 32,
            local_epochs: 1,
            alpha_adv: 1.0,
            pretrain: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub pnr_db: f64,
    pub pgd_iters: usize,
    pub schedule: Schedule,
    pub random_pnrs_db: Vec<f64>,
    pub flip_mapping: Option<Vec<usize>>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        let spec = AttackSpec::default();
        Self {
            kind: spec.kind,
            pnr_db: spec.pnr_db,
            pgd_iters: spec.pgd_iters,
            schedule: spec.schedule,
            random_pnrs_db: spec.random_pnrs_db,
            flip_mapping: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefenseSettings {
    pub kind: DefenseKind,
    pub a: f64,
    /// Defaults to 1e-7 (i.i.d.) or 1e-5 (non-i.i.d.).
    pub b: Option<f64>,
    pub gamma_max: f64,
    pub gamma_min: f64,
    pub log_base: LogBase,
    pub gamma_hat: f64,
    /// Overrides the baselines' knowledge-derived adversary estimate.
    pub z: Option<usize>,
    pub calibrate_b_rounds: Option<usize>,
    /// Write the per-round device distance matrix.
    pub dump_distances: bool,
}

impl Default for DefenseSettings {
    fn default() -> Self {
        let c = PenaltyCoeffs::default();
        Self {
            kind: DefenseKind::Usdfl,
            a: c.a,
            b: None,
            gamma_max: c.gamma_max,
            gamma_min: c.gamma_min,
            log_base: c.log_base,
            gamma_hat: 0.2,
            z: None,
            calibrate_b_rounds: None,
            dump_distances: false,
        }
    }
}

/// What the baseline defenses know about the attack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Knowledge {
    /// Adversary count and attack start are known.
    #[default]
    All,
    /// Only the adversary count is known.
    Adversaries,
    /// Only the attack start is known.
    AttackTime,
    Nothing,
}

impl Knowledge {
    pub const ALL: [Knowledge; 4] = [
        Knowledge::All,
        Knowledge::Adversaries,
        Knowledge::AttackTime,
        Knowledge::Nothing,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Knowledge::All => "all",
            Knowledge::Adversaries => "adversaries",
            Knowledge::AttackTime => "attack_time",
            Knowledge::Nothing => "nothing",
        }
    }

    fn knows_count(self) -> bool {
        matches!(self, Knowledge::All | Knowledge::Adversaries)
    }

    fn knows_time(self) -> bool {
        matches!(self, Knowledge::All | Knowledge::AttackTime)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReserveConfig {
    /// Defaults to `max(100, round(total·500/120000))`.
    pub size: Option<usize>,
    /// Defaults to `round(0.8·C)`.
    pub labels: Option<usize>,
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicsConfig {
    pub period: usize,
    pub churn_fraction: f64,
    /// Share of the training data held back for entering devices.
    pub spare_fraction: f64,
    /// Shard distribution for entering devices; the partition's non-i.i.d.
    /// settings when absent.
    pub shards: Option<NonIidSpec>,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        Self {
            period: 10,
            churn_fraction: 0.3,
            spare_fraction: 0.2,
            shards: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterPolicy {
    /// The first `filtered` devices are always excluded.
    #[default]
    Fixed,
    /// Accuracy thresholds with the configured penalty.
    Threshold,
}

/// Settings of the convex-surrogate convergence checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoryConfig {
    pub rounds: usize,
    /// L2 coefficient of the surrogate (its strong-convexity modulus).
    pub lambda: f64,
    pub policy: FilterPolicy,
    pub filtered: usize,
    /// Samples per device in the base trajectory.
    pub shard_size: usize,
    /// Parameter pairs sampled for the smoothness estimate.
    pub sample_pairs: usize,
    /// Shard-size multiplier for the error-bound scaling check.
    pub scale_factor: usize,
    pub optimum_steps: usize,
    pub optimum_tol: f64,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            rounds: 50,
            lambda: 1e-2,
            policy: FilterPolicy::Fixed,
            filtered: 3,
            shard_size: 50,
            sample_pairs: 64,
            scale_factor: 4,
            optimum_steps: 5000,
            optimum_tol: 1e-8,
        }
    }
}

/// Parses and validates a configuration document.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Parse {
        location: format!("line {} column {}", e.line(), e.column()),
        message: e.to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}

impl ExperimentConfig {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn classes(&self) -> usize {
        self.dataset.classes()
    }

    pub fn seed_list(&self) -> Vec<u64> {
        match &self.seeds {
            Some(s) => s.clone(),
            None => (0..self.n_runs as u64).map(|i| self.seed + i).collect(),
        }
    }

    pub fn adversary_count(&self) -> usize {
        (self.adversary_fraction * self.devices as f64).round() as usize
    }

    pub fn reserve_size(&self) -> usize {
        self.reserve
            .size
            .unwrap_or_else(|| MIN_RESERVE.max((self.dataset.total() as f64 * RESERVE_SHARE).round() as usize))
    }

    pub fn reserve_labels(&self) -> usize {
        self.reserve
            .labels
            .unwrap_or_else(|| ((0.8 * self.classes() as f64).round() as usize).max(1))
    }

    pub fn penalty_b(&self) -> f64 {
        self.defense.b.unwrap_or(match self.partition.mode {
            PartitionMode::Iid => 1e-7,
            PartitionMode::NonIid => 1e-5,
        })
    }

    /// Adversary estimate handed to the baselines.
    pub fn baseline_z(&self) -> usize {
        self.defense.z.unwrap_or(if self.knowledge.knows_count() {
            self.adversary_count()
        } else {
            1
        })
    }

    pub fn baseline_start(&self) -> usize {
        if self.knowledge.knows_time() {
            self.t0
        } else {
            0
        }
    }

    pub fn attack_spec(&self) -> AttackSpec {
        AttackSpec {
            kind: self.attack.kind,
            pnr_db: self.attack.pnr_db,
            pgd_iters: self.attack.pgd_iters,
            start_round: self.t0,
            schedule: self.attack.schedule,
            random_pnrs_db: self.attack.random_pnrs_db.clone(),
            flip_mapping: self.attack.flip_mapping.clone(),
        }
    }

    pub fn defense_config(&self) -> DefenseConfig {
        let d = &self.defense;
        DefenseConfig {
            kind: d.kind,
            coeffs: PenaltyCoeffs {
                a: d.a,
                b: self.penalty_b(),
                gamma_max: d.gamma_max,
                gamma_min: d.gamma_min,
                log_base: d.log_base,
            },
            gamma_hat: d.gamma_hat,
            z: self.baseline_z(),
            baseline_start: self.baseline_start(),
            calibrate_b_rounds: d.calibrate_b_rounds,
            keep_distances: d.dump_distances,
        }
    }

    pub fn dynamics_spec(&self) -> Option<Dynamics> {
        self.dynamics.as_ref().map(|d| Dynamics {
            period: d.period,
            churn_fraction: d.churn_fraction,
            shards: d.shards.unwrap_or_else(|| self.partition.noniid_spec()),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let ds = &self.dataset;
        let c = ds.classes();
        if c < 2 {
            return Err(invalid("need at least two modulation schemes"));
        }
        let mut schemes = ds.schemes.clone();
        schemes.sort_by_key(|m| m.name());
        schemes.dedup();
        if schemes.len() != c {
            return Err(invalid("modulation schemes must be distinct"));
        }
        if ds.per_class == 0 || ds.snr_db.is_empty() {
            return Err(invalid("dataset needs per_class >= 1 and at least one SNR"));
        }
        if ds.snr_db.iter().any(|s| s.is_nan() || *s == f64::NEG_INFINITY) {
            return Err(invalid("SNR levels must be numbers or +inf"));
        }
        if ds.length < MIN_LENGTH {
            return Err(invalid(format!("window length must be at least {MIN_LENGTH}")));
        }
        if !(ds.test_fraction > 0.0 && ds.test_fraction < 1.0) {
            return Err(invalid("test_fraction must lie in (0, 1)"));
        }
        if self.devices == 0 {
            return Err(invalid("devices must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.adversary_fraction) {
            return Err(invalid("adversary_fraction must lie in [0, 1]"));
        }
        if self.rounds == 0 {
            return Err(invalid("rounds must be at least 1"));
        }
        if self.n_runs == 0 || self.seeds.as_ref().is_some_and(|s| s.is_empty()) {
            return Err(invalid("need at least one run"));
        }
        if self.fp_window == 0 {
            return Err(invalid("fp_window must be at least 1"));
        }
        if self.checkpoint_every == Some(0) {
            return Err(invalid("checkpoint_every must be at least 1"));
        }
        if self.model.hidden.contains(&0) || self.model.init_std.is_some_and(|s| !(s >= 0.0)) {
            return Err(invalid("hidden widths must be positive and init_std non-negative"));
        }
        let t = &self.training;
        if !(t.lr > 0.0) || t.batch_size == 0 || t.local_epochs == 0 || !(t.alpha_adv > 0.0) {
            return Err(invalid(
                "training needs lr > 0, batch_size >= 1, local_epochs >= 1, alpha_adv > 0",
            ));
        }
        self.attack_spec().validate(c)?;

        let labels = self.reserve_labels();
        if labels == 0 || labels > c {
            return Err(invalid(format!("reserve labels must be in 1..={c}, got {labels}")));
        }
        if self.reserve_size() == 0 {
            return Err(invalid("reserve size must be positive"));
        }

        let p = &self.partition;
        if p.mode == PartitionMode::NonIid && (p.labels_per_device == 0 || p.labels_per_device > c) {
            return Err(invalid(format!("labels_per_device must be in 1..={c}")));
        }
        if p.mode == PartitionMode::NonIid && !(p.qty_mean > 0.0 && p.qty_std >= 0.0) {
            return Err(invalid("non-i.i.d. sizes need qty_mean > 0 and qty_std >= 0"));
        }

        let coeffs = self.defense_config().coeffs;
        coeffs.validate()?;
        if !(self.defense.gamma_hat >= 0.0) {
            return Err(invalid("gamma_hat must be non-negative"));
        }
        let k = self.devices;
        let z = self.baseline_z();
        match self.defense.kind {
            DefenseKind::Trimmed if k <= 2 * z => {
                return Err(invalid(format!(
                    "trimmed mean with z={z} needs more than {} devices",
                    2 * z
                )));
            }
            DefenseKind::UnionM if k <= z => {
                return Err(invalid(format!("unionM cannot drop {z} of {k} devices")));
            }
            DefenseKind::UnionT if k <= z || k - z <= 2 * z => {
                return Err(invalid(format!("unionT with z={z} needs more than {} devices", 3 * z)));
            }
            DefenseKind::Usdfl | DefenseKind::Dusdfl if k < 2 => {
                return Err(invalid("logit-distance defenses need at least 2 devices"));
            }
            _ => {}
        }

        if let Some(d) = &self.dynamics {
            if d.period == 0 || !(0.0..=1.0).contains(&d.churn_fraction) || !(0.0..1.0).contains(&d.spare_fraction) {
                return Err(invalid(
                    "dynamics need period >= 1, churn in [0,1] and spare_fraction in [0,1)",
                ));
            }
            if let Some(s) = d.shards {
                if s.labels_per_device == 0 || s.labels_per_device > c {
                    return Err(invalid(format!("entering shards need 1..={c} labels")));
                }
            }
        }

        let th = &self.theory;
        if th.rounds == 0 || !(th.lambda >= 0.0) || th.sample_pairs == 0 || th.scale_factor < 2 || th.shard_size == 0 {
            return Err(invalid(
                "theory needs rounds >= 1, lambda >= 0, sample_pairs >= 1, scale_factor >= 2, shard_size >= 1",
            ));
        }
        Ok(())
    }
}
