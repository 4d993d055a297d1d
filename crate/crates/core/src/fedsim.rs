//! Federated network simulation: partitioning, local training, adversarial
//! poisoning, server aggregation and device churn.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{derangement, poison_local_dataset, AttackRecord, AttackSpec};
use crate::defense::{
    apply_defense, device_accuracies, DefenseConfig, DefenseInput, DefenseKind, DefenseOutcome, DefenseState,
};
use crate::error::{Error, Result};
use crate::neural::{accuracy, train_epoch, ModelParams};
use crate::rng::{device_round, stream, Domain};
use crate::sigsyn::LabeledDataset;

pub use crate::defense::{fedavg, weighted_mean};

/// Splits `dataset` into `k` disjoint shards, dealing each class's samples
/// (in shuffled order) round-robin so that shard sizes and per-class counts
/// differ by at most one.
pub fn partition_iid<R: Rng + ?Sized>(dataset: &LabeledDataset, k: usize, rng: &mut R) -> Result<Vec<LabeledDataset>> {
    if k == 0 {
        return Err(Error::Config("need at least one device".into()));
    }
    if dataset.len() < k {
        return Err(Error::InsufficientData(format!(
            "{} samples cannot fill {k} shards",
            dataset.len()
        )));
    }
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); dataset.class_count];
    for (i, s) in dataset.samples.iter().enumerate() {
        pools[s.label].push(i);
    }
    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut next = 0;
    for pool in &mut pools {
        pool.shuffle(rng);
        for &i in pool.iter() {
            assigned[next].push(i);
            next = (next + 1) % k;
        }
    }
    Ok(assigned
        .into_iter()
        .map(|mut idx| {
            idx.sort_unstable();
            dataset.subset(&idx)
        })
        .collect())
}

/// Parameters of a label-skewed split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NonIidSpec {
    pub labels_per_device: usize,
    pub qty_mean: f64,
    pub qty_std: f64,
}

/// Label-skewed split: every device draws `labels_per_device` classes and a
/// size from `round(N(qty_mean, qty_std))`, then takes an equal share of
/// that size from each of its classes (clipped to what is left).
pub fn partition_noniid<R: Rng + ?Sized>(
    dataset: &LabeledDataset,
    k: usize,
    spec: NonIidSpec,
    rng: &mut R,
) -> Result<Vec<LabeledDataset>> {
    draw_noniid(dataset, k, spec, rng).map(|(shards, _)| shards)
}

/// Like [`partition_noniid`] but also returns the unused samples.
pub fn draw_noniid<R: Rng + ?Sized>(
    dataset: &LabeledDataset,
    k: usize,
    spec: NonIidSpec,
    rng: &mut R,
) -> Result<(Vec<LabeledDataset>, LabeledDataset)> {
    let classes = dataset.class_count;
    let l = spec.labels_per_device;
    if l == 0 || l > classes {
        return Err(Error::Config(format!(
            "labels per device must be in 1..={classes}, got {l}"
        )));
    }
    if !(spec.qty_std >= 0.0) || !(spec.qty_mean > 0.0) {
        return Err(Error::Config(
            "shard size distribution needs mean > 0 and std >= 0".into(),
        ));
    }
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, s) in dataset.samples.iter().enumerate() {
        pools[s.label].push(i);
    }
    for p in &mut pools {
        p.shuffle(rng);
    }
    let size_dist = Normal::new(spec.qty_mean, spec.qty_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut shards = Vec::with_capacity(k);
    for device in 0..k {
        let available: Vec<usize> = (0..classes).filter(|&c| !pools[c].is_empty()).collect();
        if available.len() < l {
            return Err(Error::InsufficientData(format!(
                "device {device} needs {l} labels but only {} classes have samples left",
                available.len()
            )));
        }
        let chosen: Vec<usize> = available.choose_multiple(rng, l).copied().collect();
        let want = size_dist.sample(rng).round().max(l as f64) as usize;
        let mut picked = Vec::with_capacity(want);
        for (j, &c) in chosen.iter().enumerate() {
            let quota = want / l + usize::from(j < want % l);
            let take = quota.min(pools[c].len()).max(1);
            let start = pools[c].len() - take;
            picked.extend(pools[c].drain(start..));
        }
        picked.sort_unstable();
        shards.push(dataset.subset(&picked));
    }
    let mut rest: Vec<usize> = pools.into_iter().flatten().collect();
    rest.sort_unstable();
    Ok((shards, dataset.subset(&rest)))
}

/// Marks `round(fraction·k)` randomly chosen devices as adversarial.
pub fn assign_adversaries<R: Rng + ?Sized>(k: usize, fraction: f64, rng: &mut R) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!(
            "adversary fraction must be in [0,1], got {fraction}"
        )));
    }
    let count = (fraction * k as f64).round() as usize;
    let mut idx: Vec<usize> = (0..k).collect();
    idx.shuffle(rng);
    let mut flags = vec![false; k];
    for &i in &idx[..count] {
        flags[i] = true;
    }
    Ok(flags)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceState {
    pub id: usize,
    pub dataset: LabeledDataset,
    pub is_adversary: bool,
    /// Attack run by this device (adversaries only).
    pub attack: Option<AttackSpec>,
    /// Scaling applied to transmitted parameters (adversaries only).
    pub alpha: f64,
    /// Rounds spent in the network, starting at 1.
    pub time_in_network: usize,
    /// Label mapping used when this device flips labels.
    pub flip_mapping: Vec<usize>,
    pub local_params: Option<ModelParams>,
}

impl DeviceState {
    pub fn size(&self) -> usize {
        self.dataset.len()
    }
}

/// Device churn settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dynamics {
    pub period: usize,
    pub churn_fraction: f64,
    /// Shard distribution for entering devices.
    pub shards: NonIidSpec,
}

/// Settings shared by every round of a simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct SimParams {
    pub lr: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub alpha_adv: f64,
    pub attack: AttackSpec,
    pub defense: DefenseConfig,
    pub dynamics: Option<Dynamics>,
    pub seed: u64,
    /// Store the aggregate parameters in every round record.
    pub keep_params: bool,
}

#[derive(Debug, Clone)]
pub struct NetworkState {
    /// Active devices in ascending id order.
    pub devices: Vec<DeviceState>,
    pub global: ModelParams,
    pub round: usize,
    pub reserve: LabeledDataset,
    /// Samples available to entering devices.
    pub spare: LabeledDataset,
    pub next_id: usize,
    pub defense_state: DefenseState,
}

impl NetworkState {
    /// Builds the initial network. Device ids are shard positions.
    pub fn new(
        shards: Vec<LabeledDataset>,
        adversary: &[bool],
        reserve: LabeledDataset,
        spare: LabeledDataset,
        global: ModelParams,
        params: &SimParams,
    ) -> Result<Self> {
        if shards.len() != adversary.len() {
            return Err(Error::dim("one adversary flag per shard required"));
        }
        if shards.is_empty() {
            return Err(Error::Config("network needs at least one device".into()));
        }
        let next_id = shards.len();
        let devices = shards
            .into_iter()
            .zip(adversary)
            .enumerate()
            .map(|(id, (dataset, &adv))| make_device(id, dataset, adv, params))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            devices,
            global,
            round: 0,
            reserve,
            spare,
            next_id,
            defense_state: DefenseState::default(),
        })
    }

    pub fn adversary_ids(&self) -> Vec<usize> {
        self.devices.iter().filter(|d| d.is_adversary).map(|d| d.id).collect()
    }
}

fn make_device(id: usize, dataset: LabeledDataset, adversary: bool, params: &SimParams) -> Result<DeviceState> {
    let classes = dataset.class_count;
    let flip_mapping = match (&params.attack.flip_mapping, adversary && classes >= 2) {
        (Some(map), _) => map.clone(),
        (None, true) => derangement(
            classes,
            &mut stream(params.seed, Domain::Poison, device_round(id, u32::MAX as usize)),
        )?,
        (None, false) => Vec::new(),
    };
    Ok(DeviceState {
        id,
        dataset,
        is_adversary: adversary,
        attack: adversary.then(|| params.attack.clone()),
        alpha: if adversary { params.alpha_adv } else { 1.0 },
        time_in_network: 1,
        flip_mapping,
        local_params: None,
    })
}

/// One round's audit record.
#[derive(Debug, Clone)]
pub struct RoundRecord {
    pub round: usize,
    /// Reserve accuracy of the broadcast model.
    pub global_acc: f64,
    /// Test accuracy of the aggregated model.
    pub test_acc: Option<f64>,
    pub device_ids: Vec<usize>,
    pub device_adversary: Vec<bool>,
    pub device_times: Vec<usize>,
    pub device_sizes: Vec<usize>,
    /// Reserve accuracy of every transmitted model.
    pub device_acc: Vec<f64>,
    pub thresholds: Option<Vec<f64>>,
    pub avg_distance: Option<f64>,
    pub penalty: Option<f64>,
    /// Ids the server treated as adversarial.
    pub perceived: Vec<usize>,
    pub all_filtered: bool,
    pub attacks: Vec<AttackRecord>,
    pub distances: Option<Vec<Vec<f64>>>,
    pub aggregate: Option<ModelParams>,
}

impl RoundRecord {
    /// Honest devices in the perceived set.
    pub fn false_positives(&self) -> usize {
        self.perceived
            .iter()
            .filter(|id| {
                self.device_ids
                    .iter()
                    .position(|d| d == *id)
                    .is_some_and(|i| !self.device_adversary[i])
            })
            .count()
    }

    /// Static threshold, or the smallest personalized one.
    pub fn threshold(&self) -> Option<f64> {
        self.thresholds
            .as_ref()
            .map(|t| t.iter().copied().fold(f64::INFINITY, f64::min))
    }
}

struct LocalResult {
    params: ModelParams,
    attack: Option<AttackRecord>,
}

fn local_update(device: &DeviceState, global: &ModelParams, round: usize, sim: &SimParams) -> Result<LocalResult> {
    let mut attack = None;
    let mut data = &device.dataset;
    let poisoned;
    if let Some(spec) = device.attack.as_ref().filter(|s| s.active(round)) {
        let mut rng = stream(sim.seed, Domain::Poison, device_round(device.id, round));
        let out = poison_local_dataset(data, global, spec, round, &device.flip_mapping, &mut rng)?;
        attack = Some(AttackRecord {
            round,
            device: device.id,
            kind: out.attack.kind,
            power: out.mean_power,
            fallback_count: out.fallback_count,
        });
        poisoned = out.dataset;
        data = &poisoned;
    }
    let mut params = global.clone();
    if !data.is_empty() {
        let mut rng = stream(sim.seed, Domain::Training, device_round(device.id, round));
        for _ in 0..sim.local_epochs {
            params = train_epoch(&params, data, sim.lr, sim.batch_size, &mut rng)?;
        }
    }
    Ok(LocalResult { params, attack })
}

/// Runs one round: broadcast, local updates (poisoned for active
/// adversaries), aggregation under the configured defense, and
/// synchronization of every device to the new global model.
///
/// The state is only modified once every step has succeeded.
pub fn run_round(state: &mut NetworkState, sim: &SimParams, test: Option<&LabeledDataset>) -> Result<RoundRecord> {
    let round = state.round;
    let global = &state.global;
    let global_acc = accuracy(global, &state.reserve)?;

    let results = state
        .devices
        .par_iter()
        .map(|d| local_update(d, global, round, sim))
        .collect::<Result<Vec<_>>>()?;
    let local: Vec<ModelParams> = results.iter().map(|r| r.params.clone()).collect();
    let sizes: Vec<usize> = state.devices.iter().map(DeviceState::size).collect();
    let alphas: Vec<f64> = state.devices.iter().map(|d| d.alpha).collect();
    let times: Vec<usize> = state.devices.iter().map(|d| d.time_in_network).collect();
    let transmitted: Vec<ModelParams> = local
        .iter()
        .zip(&alphas)
        .map(|(p, &a)| if a == 1.0 { p.clone() } else { p.scaled(a) })
        .collect();

    let mut defense_state = state.defense_state.clone();
    let outcome = if sim.defense.kind == DefenseKind::None {
        // Undefended server: scaled aggregation over the honest local models.
        DefenseOutcome {
            aggregate: fedavg(&local, &sizes, &alphas)?,
            perceived: Vec::new(),
            device_acc: device_accuracies(&transmitted, &state.reserve)?,
            thresholds: None,
            avg_distance: None,
            penalty: None,
            all_filtered: false,
            distances: None,
        }
    } else {
        apply_defense(
            &sim.defense,
            &mut defense_state,
            DefenseInput {
                round,
                params: &transmitted,
                sizes: &sizes,
                times: &times,
                reserve: &state.reserve,
                global_acc,
                previous: global,
            },
        )?
    };
    let aggregate = outcome.aggregate;
    let test_acc = test.map(|t| accuracy(&aggregate, t)).transpose()?;

    let ids: Vec<usize> = state.devices.iter().map(|d| d.id).collect();
    let record = RoundRecord {
        round,
        global_acc,
        test_acc,
        device_ids: ids.clone(),
        device_adversary: state.devices.iter().map(|d| d.is_adversary).collect(),
        device_times: times,
        device_sizes: sizes,
        device_acc: outcome.device_acc,
        thresholds: outcome.thresholds,
        avg_distance: outcome.avg_distance,
        penalty: outcome.penalty,
        perceived: outcome.perceived.iter().map(|&i| ids[i]).collect(),
        all_filtered: outcome.all_filtered,
        attacks: results.iter().filter_map(|r| r.attack.clone()).collect(),
        distances: outcome.distances,
        aggregate: sim.keep_params.then(|| aggregate.clone()),
    };

    for d in &mut state.devices {
        d.local_params = Some(aggregate.clone());
    }
    state.global = aggregate;
    state.defense_state = defense_state;
    state.round += 1;
    Ok(record)
}

/// Advances time-in-network and, every `period` rounds, replaces
/// `⌈churn·K⌉` random devices by newcomers with fresh label-skewed shards.
/// Newcomers inherit the adversarial status of the device they replace; the
/// leavers' data returns to the spare pool. Returns the `(left, joined)` ids.
pub fn apply_dynamics<R: Rng + ?Sized>(
    state: &mut NetworkState,
    t: usize,
    dynamics: Option<&Dynamics>,
    sim: &SimParams,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<usize>)> {
    for d in &mut state.devices {
        d.time_in_network += 1;
    }
    let Some(dyn_spec) = dynamics else {
        return Ok((Vec::new(), Vec::new()));
    };
    if !(0.0..=1.0).contains(&dyn_spec.churn_fraction) {
        return Err(Error::Config(format!(
            "churn fraction must be in [0,1], got {}",
            dyn_spec.churn_fraction
        )));
    }
    if dyn_spec.period == 0 || t == 0 || !t.is_multiple_of(dyn_spec.period) {
        return Ok((Vec::new(), Vec::new()));
    }
    let k = state.devices.len();
    let n = ((dyn_spec.churn_fraction * k as f64).ceil() as usize).min(k);
    if n == 0 {
        return Ok((Vec::new(), Vec::new()));
    }
    let mut positions: Vec<usize> = (0..k).collect();
    positions.shuffle(rng);
    let mut leaving: Vec<usize> = positions[..n].to_vec();
    leaving.sort_unstable();

    let mut pool = state.spare.clone();
    let mut left_ids = Vec::with_capacity(n);
    let mut roles = Vec::with_capacity(n);
    for &p in &leaving {
        let d = &state.devices[p];
        left_ids.push(d.id);
        roles.push(d.is_adversary);
        pool.extend(d.dataset.clone());
    }
    let (shards, rest) = draw_noniid(&pool, n, dyn_spec.shards, rng)?;

    let mut by_id: BTreeMap<usize, DeviceState> = state
        .devices
        .drain(..)
        .enumerate()
        .filter(|(i, _)| !leaving.contains(i))
        .map(|(_, d)| (d.id, d))
        .collect();
    let mut joined = Vec::with_capacity(n);
    for (shard, adv) in shards.into_iter().zip(roles) {
        let id = state.next_id;
        state.next_id += 1;
        let mut dev = make_device(id, shard, adv, sim)?;
        dev.local_params = Some(state.global.clone());
        joined.push(id);
        by_id.insert(id, dev);
    }
    state.devices = by_id.into_values().collect();
    state.spare = rest;
    Ok((left_ids, joined))
}

/// Server pre-training: one epoch over the reserve set.
pub fn pretrain<R: Rng + ?Sized>(
    global: &ModelParams,
    reserve: &LabeledDataset,
    lr: f64,
    batch_size: usize,
    rng: &mut R,
) -> Result<ModelParams> {
    train_epoch(global, reserve, lr, batch_size, rng)
}

/// Runs `rounds` rounds, applying dynamics before every round after the
/// first.
pub fn simulate(
    state: &mut NetworkState,
    sim: &SimParams,
    rounds: usize,
    test: Option<&LabeledDataset>,
) -> Result<Vec<RoundRecord>> {
    let mut records = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        let t = state.round;
        if t > 0 {
            let mut rng = stream(sim.seed, Domain::Dynamics, t as u64);
            apply_dynamics(state, t, sim.dynamics.as_ref(), sim, &mut rng)?;
        }
        records.push(run_round(state, sim, test)?);
    }
    Ok(records)
}
