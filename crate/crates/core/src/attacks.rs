//! Data-poisoning perturbations and the per-round poisoning of an
//! adversary's local dataset.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::{input_gradient, ModelParams};
use crate::sigsyn::{perturbation_power_for_pnr, LabeledDataset, SignalSample};

/// Gradients with a smaller norm than this have no usable direction.
pub const MIN_GRAD_NORM: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    None,
    Awgn,
    Flip,
    Fgsm,
    Pgd,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::None => "none",
            AttackKind::Awgn => "awgn",
            AttackKind::Flip => "flip",
            AttackKind::Fgsm => "fgsm",
            AttackKind::Pgd => "pgd",
        }
    }
}

impl std::fmt::Display for AttackKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Fixed,
    /// Each adversary draws its attack and power afresh every round.
    RandomPerRound,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub pnr_db: f64,
    pub pgd_iters: usize,
    pub start_round: usize,
    pub schedule: Schedule,
    /// Power levels (PNR, dB) the random schedule draws from.
    pub random_pnrs_db: Vec<f64>,
    /// Explicit label mapping for `Flip`; a seeded derangement when absent.
    pub flip_mapping: Option<Vec<usize>>,
}

impl Default for AttackSpec {
    fn default() -> Self {
        Self {
            kind: AttackKind::Pgd,
            pnr_db: 8.0,
            pgd_iters: 10,
            start_round: 25,
            schedule: Schedule::Fixed,
            random_pnrs_db: vec![8.0, 4.0, 0.0],
            flip_mapping: None,
        }
    }
}

impl AttackSpec {
    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.pgd_iters == 0 {
            return Err(Error::Validation("pgd_iters must be at least 1".into()));
        }
        if !self.pnr_db.is_finite() {
            return Err(Error::Validation("pnr_db must be finite".into()));
        }
        if self.schedule == Schedule::RandomPerRound && self.random_pnrs_db.is_empty() {
            return Err(Error::Validation(
                "random schedule needs at least one power level".into(),
            ));
        }
        if let Some(map) = &self.flip_mapping {
            check_derangement(map, classes)?;
        }
        Ok(())
    }

    /// True when an adversary poisons its data in `round`.
    pub fn active(&self, round: usize) -> bool {
        round >= self.start_round && (self.kind != AttackKind::None || self.schedule == Schedule::RandomPerRound)
    }
}

fn check_derangement(map: &[usize], classes: usize) -> Result<()> {
    let mut seen = vec![false; classes];
    if map.len() != classes {
        return Err(Error::Validation(format!(
            "flip mapping has {} entries for {classes} classes",
            map.len()
        )));
    }
    for (from, &to) in map.iter().enumerate() {
        if to >= classes || seen[to] {
            return Err(Error::Validation("flip mapping is not a permutation".into()));
        }
        if to == from {
            return Err(Error::Validation(format!("flip mapping keeps class {from} fixed")));
        }
        seen[to] = true;
    }
    Ok(())
}

/// Additive perturbation of one sample, same layout as `SignalSample::iq`.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub delta: Vec<f64>,
}

impl Perturbation {
    pub fn norm(&self) -> f64 {
        l2(&self.delta)
    }

    pub fn apply(&self, sample: &SignalSample) -> SignalSample {
        let iq = sample.iq.iter().zip(&self.delta).map(|(r, d)| r + d).collect();
        SignalSample {
            iq,
            label: sample.label,
            snr_db: sample.snr_db,
        }
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn check_power(power: f64) -> Result<()> {
    if power > 0.0 && power.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "perturbation power must be positive, got {power}"
        )))
    }
}

/// Single normalized gradient step of length `√power`.
pub fn fgsm(params: &ModelParams, sample: &SignalSample, power: f64) -> Result<Perturbation> {
    check_power(power)?;
    let g = input_gradient(params, &sample.iq, sample.label)?;
    let norm = l2(&g);
    if norm < MIN_GRAD_NORM {
        return Err(Error::DegenerateGradient(norm));
    }
    let step = power.sqrt();
    Ok(Perturbation {
        delta: g.iter().map(|x| step * (x / norm)).collect(),
    })
}

/// `iters` normalized steps of length `√power/iters`, each taken along the
/// input gradient at the currently perturbed sample.
pub fn pgd(params: &ModelParams, sample: &SignalSample, power: f64, iters: usize) -> Result<Perturbation> {
    check_power(power)?;
    if iters == 0 {
        return Err(Error::Config("PGD needs at least one iteration".into()));
    }
    let step = power.sqrt() / iters as f64;
    let mut delta = vec![0.0; sample.iq.len()];
    let mut point = sample.iq.clone();
    for q in 0..iters {
        let g = input_gradient(params, &point, sample.label)?;
        let norm = l2(&g);
        if norm < MIN_GRAD_NORM {
            if q == 0 {
                return Err(Error::DegenerateGradient(norm));
            }
            break;
        }
        for ((d, p), (x, r)) in delta.iter_mut().zip(point.iter_mut()).zip(g.iter().zip(&sample.iq)) {
            *d += step * (x / norm);
            *p = r + *d;
        }
    }
    Ok(Perturbation { delta })
}

/// White Gaussian perturbation with `E‖δ‖² = power`.
pub fn awgn_perturb<R: Rng + ?Sized>(sample: &SignalSample, power: f64, rng: &mut R) -> Perturbation {
    let n = sample.iq.len();
    if !(power > 0.0) || n == 0 {
        return Perturbation { delta: vec![0.0; n] };
    }
    let normal = Normal::new(0.0, (power / n as f64).sqrt()).expect("finite std");
    Perturbation {
        delta: (0..n).map(|_| normal.sample(rng)).collect(),
    }
}

/// Random cyclic permutation of `0..classes`; no class maps to itself.
pub fn derangement<R: Rng + ?Sized>(classes: usize, rng: &mut R) -> Result<Vec<usize>> {
    if classes < 2 {
        return Err(Error::Config(format!(
            "label flip needs at least 2 classes, got {classes}"
        )));
    }
    let mut map: Vec<usize> = (0..classes).collect();
    // Sattolo's algorithm: only produces single cycles of length `classes`.
    for i in (1..classes).rev() {
        let j = rng.random_range(0..i);
        map.swap(i, j);
    }
    Ok(map)
}

/// Relabels every sample through `mapping`; features are untouched.
pub fn relabel(dataset: &LabeledDataset, mapping: &[usize]) -> Result<LabeledDataset> {
    check_derangement(mapping, dataset.class_count).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = dataset.clone();
    for s in &mut out.samples {
        s.label = mapping[s.label];
    }
    Ok(out)
}

/// Label flip through a fresh seeded derangement.
pub fn label_flip<R: Rng + ?Sized>(dataset: &LabeledDataset, rng: &mut R) -> Result<LabeledDataset> {
    let map = derangement(dataset.class_count, rng)?;
    relabel(dataset, &map)
}

/// Attack actually applied by one adversary in one round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResolvedAttack {
    pub kind: AttackKind,
    pub pnr_db: f64,
}

impl AttackSpec {
    /// Picks the attack for this round, drawing from `rng` under the random
    /// schedule.
    pub fn resolve<R: Rng + ?Sized>(&self, rng: &mut R) -> ResolvedAttack {
        match self.schedule {
            Schedule::Fixed => ResolvedAttack {
                kind: self.kind,
                pnr_db: self.pnr_db,
            },
            Schedule::RandomPerRound => {
                const KINDS: [AttackKind; 3] = [AttackKind::Pgd, AttackKind::Fgsm, AttackKind::Awgn];
                let kind = *KINDS.choose(rng).expect("non-empty");
                let pnr_db = *self.random_pnrs_db.choose(rng).unwrap_or(&self.pnr_db);
                ResolvedAttack { kind, pnr_db }
            }
        }
    }
}

/// One line of the attack audit log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackRecord {
    pub round: usize,
    pub device: usize,
    pub kind: AttackKind,
    /// Mean per-sample perturbation power.
    pub power: f64,
    pub fallback_count: usize,
}

#[derive(Debug, Clone)]
pub struct PoisonOutcome {
    pub dataset: LabeledDataset,
    pub attack: ResolvedAttack,
    pub mean_power: f64,
    /// Samples whose gradient attack degenerated and fell back to AWGN.
    pub fallback_count: usize,
}

/// Poisons `data` against the freshly received global model.
///
/// Outside the active window (`round < start_round`) or with kind `None` the
/// data is returned unchanged. `flip_mapping` is used by label flipping.
pub fn poison_local_dataset<R: Rng + ?Sized>(
    data: &LabeledDataset,
    global: &ModelParams,
    spec: &AttackSpec,
    round: usize,
    flip_mapping: &[usize],
    rng: &mut R,
) -> Result<PoisonOutcome> {
    let attack = spec.resolve(rng);
    let unchanged = |attack| PoisonOutcome {
        dataset: data.clone(),
        attack,
        mean_power: 0.0,
        fallback_count: 0,
    };
    if round < spec.start_round || attack.kind == AttackKind::None {
        return Ok(unchanged(ResolvedAttack {
            kind: AttackKind::None,
            pnr_db: attack.pnr_db,
        }));
    }
    if attack.kind == AttackKind::Flip {
        let mut out = unchanged(attack);
        out.dataset = relabel(data, flip_mapping)?;
        return Ok(out);
    }

    let mut samples = Vec::with_capacity(data.len());
    let mut fallback_count = 0;
    let mut total_power = 0.0;
    for s in &data.samples {
        let power = perturbation_power_for_pnr(attack.pnr_db, s.snr_db, s);
        total_power += power;
        if !(power > 0.0) {
            samples.push(s.clone());
            continue;
        }
        let crafted = match attack.kind {
            AttackKind::Fgsm => fgsm(global, s, power),
            AttackKind::Pgd => pgd(global, s, power, spec.pgd_iters),
            _ => Ok(awgn_perturb(s, power, rng)),
        };
        let delta = match crafted {
            Ok(d) => d,
            Err(Error::DegenerateGradient(_)) => {
                fallback_count += 1;
                awgn_perturb(s, power, rng)
            }
            Err(e) => return Err(e),
        };
        samples.push(delta.apply(s));
    }
    let mean_power = if data.is_empty() {
        0.0
    } else {
        total_power / data.len() as f64
    };
    Ok(PoisonOutcome {
        dataset: LabeledDataset::new(samples, data.class_count)?,
        attack,
        mean_power,
        fallback_count,
    })
}
