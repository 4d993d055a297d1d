//! Server-side defenses: logit-distance accuracy thresholds (static and
//! time-in-network weighted) and the coordinate-wise and reserve-ranked
//! baselines.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::{argmax, cross_entropy, forward_logits, ModelParams};
use crate::sigsyn::LabeledDataset;

/// Raw pre-softmax outputs of one model on the reserve set, `rows×cols`
/// row-major (one row per reserve sample, one column per class).
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMatrix {
    pub values: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

impl LogitMatrix {
    pub fn column(&self, i: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.values[r * self.cols + i]).collect()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    /// Columns with entries sorted ascending, ready for repeated W₁ calls.
    pub fn sorted_columns(&self) -> Vec<Vec<f64>> {
        (0..self.cols)
            .map(|i| {
                let mut c = self.column(i);
                c.sort_by(f64::total_cmp);
                c
            })
            .collect()
    }
}

pub fn extract_logits(params: &ModelParams, reserve: &LabeledDataset) -> Result<LogitMatrix> {
    if reserve.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let cols = params.arch().output_dim;
    let mut values = Vec::with_capacity(reserve.len() * cols);
    for s in &reserve.samples {
        values.extend(forward_logits(params, &s.iq)?);
    }
    Ok(LogitMatrix {
        values,
        rows: reserve.len(),
        cols,
    })
}

/// 1-Wasserstein distance between two equal-size empirical distributions:
/// the minimum over pairings of the summed absolute differences, obtained by
/// pairing sorted orders.
pub fn wasserstein1(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::dim(format!(
            "W1 arrays differ in length: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    let mut a = p.to_vec();
    let mut b = q.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    Ok(sorted_w1(&a, &b))
}

fn sorted_w1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// `K×K` matrix whose `(k1, k2)` entry is `Σ_i W₁(col_i(k1), col_i(k2))`.
pub fn distance_matrix(logits: &[LogitMatrix]) -> Result<Vec<Vec<f64>>> {
    let k = logits.len();
    if let Some(first) = logits.first() {
        if logits.iter().any(|m| m.rows != first.rows || m.cols != first.cols) {
            return Err(Error::dim("logit matrices differ in shape"));
        }
    }
    let sorted: Vec<Vec<Vec<f64>>> = logits.par_iter().map(LogitMatrix::sorted_columns).collect();
    let mut m = vec![vec![0.0; k]; k];
    for a in 0..k {
        for b in a + 1..k {
            let d: f64 = sorted[a].iter().zip(&sorted[b]).map(|(x, y)| sorted_w1(x, y)).sum();
            m[a][b] = d;
            m[b][a] = d;
        }
    }
    Ok(m)
}

/// Average logit distance from a precomputed distance matrix. Each device's
/// summed distance to the others is divided by `C(K−1)`; the per-device
/// terms are summed (not averaged) over devices, optionally reweighted.
pub fn avg_distance_from_matrix(matrix: &[Vec<f64>], classes: usize, weights: Option<&[f64]>) -> Result<f64> {
    let k = matrix.len();
    if k < 2 {
        return Err(Error::Config(format!(
            "logit distance needs at least 2 devices, got {k}"
        )));
    }
    let denom = (classes * (k - 1)) as f64;
    let mut total = 0.0;
    for (k1, row) in matrix.iter().enumerate() {
        let inner: f64 = row.iter().enumerate().filter(|(k2, _)| *k2 != k1).map(|(_, d)| d).sum();
        let term = inner / denom;
        total += match weights {
            Some(w) => w[k1] * term,
            None => term,
        };
    }
    Ok(total)
}

pub fn avg_logit_distance(logits: &[LogitMatrix]) -> Result<f64> {
    let m = distance_matrix(logits)?;
    avg_distance_from_matrix(&m, logits.first().map_or(0, |l| l.cols), None)
}

/// `t_k / t̄` for each device.
pub fn time_weights(times: &[usize]) -> Vec<f64> {
    let mean = times.iter().sum::<usize>() as f64 / times.len().max(1) as f64;
    times
        .iter()
        .map(|&t| if mean > 0.0 { t as f64 / mean } else { 0.0 })
        .collect()
}

pub fn weighted_avg_logit_distance(logits: &[LogitMatrix], times: &[usize]) -> Result<f64> {
    if times.len() != logits.len() {
        return Err(Error::dim(format!(
            "{} times for {} devices",
            times.len(),
            logits.len()
        )));
    }
    let m = distance_matrix(logits)?;
    avg_distance_from_matrix(&m, logits.first().map_or(0, |l| l.cols), Some(&time_weights(times)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogBase {
    #[default]
    Ln,
    Log10,
    Log2,
}

impl LogBase {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            LogBase::Ln => x.ln(),
            LogBase::Log10 => x.log10(),
            LogBase::Log2 => x.log2(),
        }
    }
}

/// Coefficients of the clamped logarithmic penalty `A·log(B·ζ̄)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyCoeffs {
    pub a: f64,
    pub b: f64,
    pub gamma_max: f64,
    pub gamma_min: f64,
    pub log_base: LogBase,
}

impl Default for PenaltyCoeffs {
    fn default() -> Self {
        Self {
            a: 5.0,
            b: 1e-7,
            gamma_max: 0.4,
            gamma_min: 0.3,
            log_base: LogBase::Ln,
        }
    }
}

impl PenaltyCoeffs {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |g: f64| g > 0.0 && g < 1.0;
        if !(in_unit(self.gamma_min) && in_unit(self.gamma_max) && self.gamma_min < self.gamma_max) {
            return Err(Error::Validation(format!(
                "need 0 < gamma_min < gamma_max < 1, got {} and {}",
                self.gamma_min, self.gamma_max
            )));
        }
        if !(self.b > 0.0) || !self.a.is_finite() {
            return Err(Error::Validation("penalty needs finite A and positive B".into()));
        }
        Ok(())
    }
}

/// `clamp(A·log(B·ζ̄), γ_min, γ_max)`; `ζ̄ = 0` maps to `γ_min`.
pub fn penalty(avg_distance: f64, c: &PenaltyCoeffs) -> f64 {
    let raw = c.a * c.log_base.apply(c.b * avg_distance);
    if raw.is_nan() {
        return c.gamma_min;
    }
    raw.clamp(c.gamma_min, c.gamma_max)
}

pub fn threshold(global_acc: f64, gamma: f64) -> f64 {
    global_acc - gamma
}

/// Threshold lowered for devices that joined recently: `ξ − γ − (1 − t_k/t̂)·γ̂`.
pub fn personalized_threshold(global_acc: f64, gamma: f64, t_k: usize, t_max: usize, gamma_hat: f64) -> f64 {
    let frac = if t_max == 0 { 1.0 } else { t_k as f64 / t_max as f64 };
    global_acc - gamma - (1.0 - frac) * gamma_hat
}

fn check_shapes(params: &[ModelParams]) -> Result<()> {
    let first = params
        .first()
        .ok_or_else(|| Error::Config("no device parameters to aggregate".into()))?;
    if params.iter().any(|p| !p.same_shape(first)) {
        return Err(Error::dim("device parameters differ in shape"));
    }
    Ok(())
}

/// `Σ c_k·w_k`.
pub fn combine(params: &[ModelParams], coeffs: &[f64]) -> Result<ModelParams> {
    check_shapes(params)?;
    if coeffs.len() != params.len() {
        return Err(Error::dim(format!(
            "{} coefficients for {} models",
            coeffs.len(),
            params.len()
        )));
    }
    let mut out = vec![0.0; params[0].len()];
    for (p, &c) in params.iter().zip(coeffs) {
        if c == 0.0 {
            continue;
        }
        for (o, v) in out.iter_mut().zip(p.as_slice()) {
            *o += c * v;
        }
    }
    params[0].with_values(out)
}

/// Accuracy-filtered data-weighted mean. Devices with `acc_k < threshold_k`
/// form the perceived adversary set.
pub fn filtered_aggregate(
    params: &[ModelParams],
    sizes: &[usize],
    accuracies: &[f64],
    thresholds: &[f64],
) -> Result<FilterOutcome> {
    let k = params.len();
    if sizes.len() != k || accuracies.len() != k || thresholds.len() != k {
        return Err(Error::dim("per-device inputs differ in length"));
    }
    let keep: Vec<bool> = accuracies.iter().zip(thresholds).map(|(a, t)| a >= t).collect();
    let kept_total: usize = sizes.iter().zip(&keep).filter(|(_, k)| **k).map(|(d, _)| d).sum();
    if kept_total == 0 {
        return Err(Error::AllFiltered);
    }
    let coeffs: Vec<f64> = sizes
        .iter()
        .zip(&keep)
        .map(|(&d, &k)| if k { d as f64 / kept_total as f64 } else { 0.0 })
        .collect();
    let aggregate = combine(params, &coeffs)?;
    let perceived = keep.iter().enumerate().filter(|(_, k)| !**k).map(|(i, _)| i).collect();
    Ok(FilterOutcome {
        aggregate,
        perceived,
        coefficients: coeffs,
    })
}

#[derive(Debug, Clone)]
pub struct FilterOutcome {
    pub aggregate: ModelParams,
    /// Indices of filtered devices.
    pub perceived: Vec<usize>,
    pub coefficients: Vec<f64>,
}

/// Static-threshold aggregation: one threshold for every device.
pub fn usdfl_aggregate(
    params: &[ModelParams],
    sizes: &[usize],
    accuracies: &[f64],
    thresh: f64,
) -> Result<FilterOutcome> {
    filtered_aggregate(params, sizes, accuracies, &vec![thresh; params.len()])
}

/// Personalized-threshold aggregation.
pub fn dusdfl_aggregate(
    params: &[ModelParams],
    sizes: &[usize],
    accuracies: &[f64],
    thresholds: &[f64],
) -> Result<FilterOutcome> {
    filtered_aggregate(params, sizes, accuracies, thresholds)
}

/// Per-coordinate values across devices, one vector per coordinate, sorted.
fn sorted_coordinates(params: &[ModelParams]) -> Vec<Vec<(f64, usize)>> {
    let n = params[0].len();
    (0..n)
        .map(|j| {
            let mut col: Vec<(f64, usize)> = params.iter().enumerate().map(|(k, p)| (p.as_slice()[j], k)).collect();
            col.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            col
        })
        .collect()
}

/// Coordinate-wise median; even counts take the lower-middle element.
pub fn median_aggregate(params: &[ModelParams]) -> Result<ModelParams> {
    check_shapes(params)?;
    let mid = (params.len() - 1) / 2;
    let out = sorted_coordinates(params).into_iter().map(|c| c[mid].0).collect();
    params[0].with_values(out)
}

/// Coordinate-wise mean after dropping the `z` largest and `z` smallest values.
pub fn trimmed_aggregate(params: &[ModelParams], z: usize) -> Result<ModelParams> {
    check_shapes(params)?;
    let k = params.len();
    if k <= 2 * z {
        return Err(Error::Config(format!(
            "trimmed mean needs more than {} devices, got {k}",
            2 * z
        )));
    }
    let kept = (k - 2 * z) as f64;
    let out = sorted_coordinates(params)
        .into_iter()
        .map(|c| c[z..k - z].iter().map(|(v, _)| v).sum::<f64>() / kept)
        .collect();
    params[0].with_values(out)
}

/// The `z` devices that most often supply one of the `z` largest or smallest
/// values of a coordinate; ties go to the lower index.
pub fn coordinate_outliers(params: &[ModelParams], z: usize) -> Result<Vec<usize>> {
    check_shapes(params)?;
    let k = params.len();
    let z = z.min(k);
    if z == 0 {
        return Ok(Vec::new());
    }
    let mut counts = vec![0usize; k];
    for col in sorted_coordinates(params) {
        let ends = z.min(k / 2).max(1);
        for &(_, dev) in col[..ends].iter().chain(&col[k - ends..]) {
            counts[dev] += 1;
        }
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let mut out = order[..z].to_vec();
    out.sort_unstable();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerRule {
    Median,
    Trimmed,
}

/// Reserve-set error and loss of one model.
pub fn reserve_scores(params: &ModelParams, reserve: &LabeledDataset) -> Result<(f64, f64)> {
    if reserve.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut wrong = 0usize;
    let mut loss = 0.0;
    for s in &reserve.samples {
        let z = forward_logits(params, &s.iq)?;
        if argmax(&z) != s.label {
            wrong += 1;
        }
        loss += cross_entropy(&z, s.label);
    }
    let n = reserve.len() as f64;
    Ok((wrong as f64 / n, loss / n))
}

/// Drops the `z` devices with the highest reserve error (higher loss first
/// on ties), then applies the inner rule to the rest. Returns the aggregate
/// and the dropped indices.
pub fn union_aggregate(
    params: &[ModelParams],
    scores: &[(f64, f64)],
    z: usize,
    inner: InnerRule,
) -> Result<(ModelParams, Vec<usize>)> {
    check_shapes(params)?;
    let k = params.len();
    if scores.len() != k {
        return Err(Error::dim("one score pair per device required"));
    }
    if k <= z || (inner == InnerRule::Trimmed && k - z <= 2 * z) {
        return Err(Error::Config(format!(
            "cannot drop {z} of {k} devices for the {inner:?} rule"
        )));
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .0
            .total_cmp(&scores[a].0)
            .then(scores[b].1.total_cmp(&scores[a].1))
            .then(a.cmp(&b))
    });
    let mut dropped = order[..z].to_vec();
    dropped.sort_unstable();
    let survivors: Vec<ModelParams> = (0..k)
        .filter(|i| !dropped.contains(i))
        .map(|i| params[i].clone())
        .collect();
    let aggregate = match inner {
        InnerRule::Median => median_aggregate(&survivors)?,
        InnerRule::Trimmed => trimmed_aggregate(&survivors, z)?,
    };
    Ok((aggregate, dropped))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseKind {
    #[default]
    None,
    Usdfl,
    Dusdfl,
    Median,
    Trimmed,
    UnionM,
    UnionT,
}

impl DefenseKind {
    pub fn name(self) -> &'static str {
        match self {
            DefenseKind::None => "none",
            DefenseKind::Usdfl => "usdfl",
            DefenseKind::Dusdfl => "dusdfl",
            DefenseKind::Median => "median",
            DefenseKind::Trimmed => "trimmed",
            DefenseKind::UnionM => "union_m",
            DefenseKind::UnionT => "union_t",
        }
    }

    pub fn uses_threshold(self) -> bool {
        matches!(self, DefenseKind::Usdfl | DefenseKind::Dusdfl)
    }

    pub fn is_baseline(self) -> bool {
        matches!(
            self,
            DefenseKind::Median | DefenseKind::Trimmed | DefenseKind::UnionM | DefenseKind::UnionT
        )
    }
}

impl std::fmt::Display for DefenseKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Fully resolved defense settings for a simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseConfig {
    pub kind: DefenseKind,
    pub coeffs: PenaltyCoeffs,
    /// Largest extra threshold reduction granted to new devices.
    pub gamma_hat: f64,
    /// Number of devices the baselines assume to be adversarial.
    pub z: usize,
    /// First round in which a baseline replaces plain averaging.
    pub baseline_start: usize,
    /// When set, B is recalibrated after this many warm-up rounds so that
    /// the warm-up distances map to `γ_min`.
    pub calibrate_b_rounds: Option<usize>,
    /// Keep the pairwise distance matrix in every round record.
    pub keep_distances: bool,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        Self {
            kind: DefenseKind::None,
            coeffs: PenaltyCoeffs::default(),
            gamma_hat: 0.2,
            z: 3,
            baseline_start: 0,
            calibrate_b_rounds: None,
            keep_distances: false,
        }
    }
}

/// Mutable defense state carried across rounds.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DefenseState {
    pub warmup_distances: Vec<f64>,
    pub calibrated_b: Option<f64>,
}

/// Per-round inputs to a defense. All slices are indexed by device position.
#[derive(Debug, Clone, Copy)]
pub struct DefenseInput<'a> {
    pub round: usize,
    pub params: &'a [ModelParams],
    pub sizes: &'a [usize],
    pub times: &'a [usize],
    pub reserve: &'a LabeledDataset,
    pub global_acc: f64,
    pub previous: &'a ModelParams,
}

#[derive(Debug, Clone)]
pub struct DefenseOutcome {
    pub aggregate: ModelParams,
    /// Positions of devices the server treated as adversarial.
    pub perceived: Vec<usize>,
    pub device_acc: Vec<f64>,
    /// Per-device thresholds (threshold defenses only).
    pub thresholds: Option<Vec<f64>>,
    pub avg_distance: Option<f64>,
    pub penalty: Option<f64>,
    /// Everything was filtered and the previous global model was kept.
    pub all_filtered: bool,
    pub distances: Option<Vec<Vec<f64>>>,
}

/// Reserve accuracies of every device model.
pub fn device_accuracies(params: &[ModelParams], reserve: &LabeledDataset) -> Result<Vec<f64>> {
    params.par_iter().map(|p| crate::neural::accuracy(p, reserve)).collect()
}

/// Data-size weighted mean with per-device scaling factors:
/// `Σ (D_k/ΣD)·α_k·w_k`.
pub fn fedavg(params: &[ModelParams], sizes: &[usize], alphas: &[f64]) -> Result<ModelParams> {
    if sizes.len() != params.len() || alphas.len() != params.len() {
        return Err(Error::dim("per-device inputs differ in length"));
    }
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(Error::Config("total data size is zero".into()));
    }
    let coeffs: Vec<f64> = sizes
        .iter()
        .zip(alphas)
        .map(|(&d, &a)| d as f64 / total as f64 * a)
        .collect();
    combine(params, &coeffs)
}

/// Plain data-size weighted mean `Σ (D_k/ΣD)·w_k`, computed coordinate by
/// coordinate as a ratio of sums.
pub fn weighted_mean(params: &[ModelParams], sizes: &[usize]) -> Result<ModelParams> {
    check_shapes(params)?;
    if sizes.len() != params.len() {
        return Err(Error::dim("per-device inputs differ in length"));
    }
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(Error::Config("total data size is zero".into()));
    }
    let out = (0..params[0].len())
        .map(|j| {
            params
                .iter()
                .zip(sizes)
                .map(|(p, &d)| d as f64 * p.as_slice()[j])
                .sum::<f64>()
                / total as f64
        })
        .collect();
    params[0].with_values(out)
}

/// Runs the configured defense on the transmitted parameters.
pub fn apply_defense(cfg: &DefenseConfig, state: &mut DefenseState, input: DefenseInput<'_>) -> Result<DefenseOutcome> {
    let k = input.params.len();
    let device_acc = device_accuracies(input.params, input.reserve)?;
    let mut out = DefenseOutcome {
        aggregate: input.previous.clone(),
        perceived: Vec::new(),
        device_acc,
        thresholds: None,
        avg_distance: None,
        penalty: None,
        all_filtered: false,
        distances: None,
    };
    let baseline_idle = cfg.kind.is_baseline() && input.round < cfg.baseline_start;
    match cfg.kind {
        DefenseKind::None => {
            out.aggregate = fedavg(input.params, input.sizes, &vec![1.0; k])?;
        }
        _ if baseline_idle => {
            out.aggregate = fedavg(input.params, input.sizes, &vec![1.0; k])?;
        }
        DefenseKind::Usdfl | DefenseKind::Dusdfl => {
            let logits = input
                .params
                .par_iter()
                .map(|p| extract_logits(p, input.reserve))
                .collect::<Result<Vec<_>>>()?;
            let classes = input.params[0].arch().output_dim;
            let matrix = distance_matrix(&logits)?;
            let dynamic = cfg.kind == DefenseKind::Dusdfl;
            let weights = dynamic.then(|| time_weights(input.times));
            let zeta = avg_distance_from_matrix(&matrix, classes, weights.as_deref())?;
            let coeffs = effective_coeffs(cfg, state, input.round, zeta);
            let gamma = penalty(zeta, &coeffs);
            let thresholds: Vec<f64> = if dynamic {
                let t_max = input.times.iter().copied().max().unwrap_or(1);
                input
                    .times
                    .iter()
                    .map(|&t| personalized_threshold(input.global_acc, gamma, t, t_max, cfg.gamma_hat))
                    .collect()
            } else {
                vec![threshold(input.global_acc, gamma); k]
            };
            match filtered_aggregate(input.params, input.sizes, &out.device_acc, &thresholds) {
                Ok(f) => {
                    out.aggregate = f.aggregate;
                    out.perceived = f.perceived;
                }
                Err(Error::AllFiltered) => {
                    out.all_filtered = true;
                    out.perceived = (0..k).collect();
                }
                Err(e) => return Err(e),
            }
            out.thresholds = Some(thresholds);
            out.avg_distance = Some(zeta);
            out.penalty = Some(gamma);
            if cfg.keep_distances {
                out.distances = Some(matrix);
            }
        }
        DefenseKind::Median => {
            out.aggregate = median_aggregate(input.params)?;
            out.perceived = coordinate_outliers(input.params, cfg.z)?;
        }
        DefenseKind::Trimmed => {
            out.aggregate = trimmed_aggregate(input.params, cfg.z)?;
            out.perceived = coordinate_outliers(input.params, cfg.z)?;
        }
        DefenseKind::UnionM | DefenseKind::UnionT => {
            let scores = input
                .params
                .par_iter()
                .map(|p| reserve_scores(p, input.reserve))
                .collect::<Result<Vec<_>>>()?;
            let inner = if cfg.kind == DefenseKind::UnionM {
                InnerRule::Median
            } else {
                InnerRule::Trimmed
            };
            let (agg, dropped) = union_aggregate(input.params, &scores, cfg.z, inner)?;
            out.aggregate = agg;
            out.perceived = dropped;
        }
    }
    Ok(out)
}

/// Penalty coefficients in force this round, updating the B calibration.
fn effective_coeffs(cfg: &DefenseConfig, state: &mut DefenseState, round: usize, zeta: f64) -> PenaltyCoeffs {
    let mut coeffs = cfg.coeffs;
    let Some(warmup) = cfg.calibrate_b_rounds else {
        return coeffs;
    };
    if let Some(b) = state.calibrated_b {
        coeffs.b = b;
        return coeffs;
    }
    if round < warmup {
        state.warmup_distances.push(zeta);
        // Until calibrated, hold the penalty at its floor.
        coeffs.a = 0.0;
        coeffs.b = 1.0;
        return coeffs;
    }
    let reference = state.warmup_distances.iter().copied().fold(0.0, f64::max);
    if reference > 0.0 {
        // invert A·log(B·ζ) = γ_min for the chosen log base
        let target = coeffs.gamma_min / coeffs.a;
        let scale = match coeffs.log_base {
            LogBase::Ln => target.exp(),
            LogBase::Log10 => 10f64.powf(target),
            LogBase::Log2 => 2f64.powf(target),
        };
        coeffs.b = scale / reference;
        state.calibrated_b = Some(coeffs.b);
    }
    coeffs
}
