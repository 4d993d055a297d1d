//! Empirical checks of the convergence analysis on a convex surrogate:
//! L2-regularized softmax regression trained by full-batch gradient steps.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, FilterPolicy};
use crate::defense::{
    avg_distance_from_matrix, distance_matrix, extract_logits, penalty, threshold, weighted_mean, PenaltyCoeffs,
};
use crate::error::{Error, Result};
use crate::fedsim::partition_iid;
use crate::neural::{accuracy, loss_and_grads, mean_loss, ArchSpec, ModelParams};
use crate::rng::{stream, Domain};
use crate::sigsyn::{build_dataset, LabeledDataset, SignalSample};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Convexity {
    /// Strongly convex with the given modulus.
    Strong(f64),
    NonConvex,
}

/// A differentiable loss over a flat parameter vector.
pub trait Objective: Sync {
    fn dim(&self) -> usize;
    fn loss(&self, w: &[f64]) -> Result<f64>;
    fn grad(&self, w: &[f64]) -> Result<Vec<f64>>;
    fn convexity(&self) -> Convexity;
}

/// `½·c·‖w‖²`.
#[derive(Debug, Clone, Copy)]
pub struct Quadratic {
    pub dim: usize,
    pub curvature: f64,
}

impl Objective for Quadratic {
    fn dim(&self) -> usize {
        self.dim
    }

    fn loss(&self, w: &[f64]) -> Result<f64> {
        Ok(0.5 * self.curvature * dot(w, w))
    }

    fn grad(&self, w: &[f64]) -> Result<Vec<f64>> {
        Ok(w.iter().map(|v| self.curvature * v).collect())
    }

    fn convexity(&self) -> Convexity {
        Convexity::Strong(self.curvature)
    }
}

/// Mean cross-entropy of softmax regression plus `λ/2·‖w‖²` over every
/// parameter (biases included).
#[derive(Debug, Clone)]
pub struct Surrogate<'a> {
    pub arch: ArchSpec,
    pub data: Vec<&'a SignalSample>,
    pub lambda: f64,
}

impl<'a> Surrogate<'a> {
    pub fn new(input_dim: usize, classes: usize, data: Vec<&'a SignalSample>, lambda: f64) -> Self {
        Self {
            arch: ArchSpec::linear(input_dim, classes),
            data,
            lambda,
        }
    }

    fn params(&self, w: &[f64]) -> Result<ModelParams> {
        ModelParams::unflatten(self.arch.clone(), w)
    }
}

impl Objective for Surrogate<'_> {
    fn dim(&self) -> usize {
        self.arch.param_count()
    }

    fn loss(&self, w: &[f64]) -> Result<f64> {
        let ce = mean_loss(&self.params(w)?, self.data.iter().copied())?;
        Ok(ce + 0.5 * self.lambda * dot(w, w))
    }

    fn grad(&self, w: &[f64]) -> Result<Vec<f64>> {
        let g = loss_and_grads(&self.params(w)?, self.data.iter().copied())?;
        Ok(g.param_grads
            .as_slice()
            .iter()
            .zip(w)
            .map(|(g, v)| g + self.lambda * v)
            .collect())
    }

    fn convexity(&self) -> Convexity {
        Convexity::Strong(self.lambda)
    }
}

/// Cross-entropy of a network with hidden layers; not convex.
#[derive(Debug, Clone)]
pub struct NetworkLoss<'a> {
    pub arch: ArchSpec,
    pub data: Vec<&'a SignalSample>,
}

impl Objective for NetworkLoss<'_> {
    fn dim(&self) -> usize {
        self.arch.param_count()
    }

    fn loss(&self, w: &[f64]) -> Result<f64> {
        mean_loss(
            &ModelParams::unflatten(self.arch.clone(), w)?,
            self.data.iter().copied(),
        )
    }

    fn grad(&self, w: &[f64]) -> Result<Vec<f64>> {
        let p = ModelParams::unflatten(self.arch.clone(), w)?;
        Ok(loss_and_grads(&p, self.data.iter().copied())?.param_grads.flatten())
    }

    fn convexity(&self) -> Convexity {
        if self.arch.hidden.is_empty() {
            Convexity::Strong(0.0)
        } else {
            Convexity::NonConvex
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Inflation applied to the largest observed gradient-difference ratio.
pub const SMOOTHNESS_SAFETY: f64 = 1.5;
const POWER_STEPS: usize = 8;
const PROBE_SCALES: [f64; 3] = [0.01, 0.1, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Smoothness {
    pub rho: f64,
    pub mu: f64,
    /// Largest ratio before inflation.
    pub max_ratio: f64,
}

/// Estimates the gradient Lipschitz constant from `pairs` parameter pairs.
///
/// Pairs come in groups around random base points; within a group the
/// offset direction follows the previous gradient difference (power
/// iteration on the Hessian), so the ratio approaches the largest
/// curvature. The strong-convexity modulus is taken from the objective.
pub fn estimate_smoothness<O: Objective, R: Rng + ?Sized>(obj: &O, pairs: usize, rng: &mut R) -> Result<Smoothness> {
    let mu = match obj.convexity() {
        Convexity::Strong(mu) => mu,
        Convexity::NonConvex => {
            return Err(Error::SurrogateRequired(
                "smoothness and strong convexity are only defined for the convex surrogate".into(),
            ))
        }
    };
    let n = obj.dim();
    let mut max_ratio: f64 = 0.0;
    let mut base = Vec::new();
    let mut g_base = Vec::new();
    let mut dir: Vec<f64> = Vec::new();
    for i in 0..pairs {
        if i % POWER_STEPS == 0 {
            let scale = PROBE_SCALES[(i / POWER_STEPS) % PROBE_SCALES.len()];
            let normal = Normal::new(0.0, scale).expect("positive scale");
            base = (0..n).map(|_| normal.sample(rng)).collect();
            g_base = obj.grad(&base)?;
            dir = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        }
        let len = norm(&dir);
        if len == 0.0 {
            continue;
        }
        let eps = 1e-3 * (1.0 + norm(&base)) / len;
        let other: Vec<f64> = base.iter().zip(&dir).map(|(b, d)| b + eps * d).collect();
        let diff = sub(&obj.grad(&other)?, &g_base);
        let ratio = norm(&diff) / norm(&sub(&other, &base));
        if ratio.is_finite() {
            max_ratio = max_ratio.max(ratio);
        }
        dir = diff;
    }
    Ok(Smoothness {
        rho: SMOOTHNESS_SAFETY * max_ratio,
        mu,
        max_ratio,
    })
}

/// `ŵ − w`: standard aggregate minus filtered aggregate.
pub fn zeta_gap(standard: &[f64], filtered: &[f64]) -> Result<Vec<f64>> {
    if standard.len() != filtered.len() {
        return Err(Error::dim("parameter vectors differ in length"));
    }
    Ok(sub(standard, filtered))
}

/// `((K−Q)/(K·Q))·Σ_q g_q − (1/K)·Σ_a g_a` for kept gradients `g_q` and
/// filtered gradients `g_a`.
pub fn gradient_loss_differential(kept: &[Vec<f64>], filtered: &[Vec<f64>]) -> Result<Vec<f64>> {
    let q = kept.len();
    if q == 0 {
        return Err(Error::Config(
            "gradient differential needs at least one kept device".into(),
        ));
    }
    let k = (q + filtered.len()) as f64;
    let qf = q as f64;
    let n = kept[0].len();
    if kept.iter().chain(filtered).any(|g| g.len() != n) {
        return Err(Error::dim("device gradients differ in length"));
    }
    let c = (k - qf) / (k * qf);
    Ok((0..n)
        .map(|j| {
            let sq: f64 = kept.iter().map(|g| g[j]).sum();
            let sa: f64 = filtered.iter().map(|g| g[j]).sum();
            c * sq - sa / k
        })
        .collect())
}

/// Rearranged form: kept mean minus overall mean.
pub fn gradient_loss_differential_rearranged(kept: &[Vec<f64>], filtered: &[Vec<f64>]) -> Result<Vec<f64>> {
    let q = kept.len();
    if q == 0 {
        return Err(Error::Config(
            "gradient differential needs at least one kept device".into(),
        ));
    }
    let k = (q + filtered.len()) as f64;
    let n = kept[0].len();
    Ok((0..n)
        .map(|j| {
            let sq: f64 = kept.iter().map(|g| g[j]).sum();
            let sa: f64 = filtered.iter().map(|g| g[j]).sum();
            sq / q as f64 - (sq + sa) / k
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LemmaCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// `ℒ(ŵ) − ℒ(w) ≤ ζᵀ∇ℒ(w) + ρ/2·‖ζ‖²`.
pub fn check_lemma_gap(loss_standard: f64, loss_filtered: f64, zeta: &[f64], grad: &[f64], rho: f64) -> LemmaCheck {
    let lhs = loss_standard - loss_filtered;
    let rhs = dot(zeta, grad) + 0.5 * rho * dot(zeta, zeta);
    LemmaCheck {
        lhs,
        rhs,
        holds: lhs <= rhs + 1e-9,
    }
}

/// One round of the surrogate trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStep {
    pub round: usize,
    /// Global model broadcast in this round.
    pub w: Vec<f64>,
    /// Filtered aggregate (next global model).
    pub w_next: Vec<f64>,
    /// Unfiltered aggregate of the same device models.
    pub w_hat_next: Vec<f64>,
    /// Gradient loss differential at `w`.
    pub e: Vec<f64>,
    /// Device positions excluded this round.
    pub filtered: Vec<usize>,
    /// `‖∇ℒ(D_q, w) − ∇ℒ(w)‖` for every device.
    pub device_deviation: Vec<f64>,
}

/// Per-round theory bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRecord {
    pub round: usize,
    pub filtered: Vec<usize>,
    pub zeta_norm: f64,
    pub e_norm: f64,
    pub lemma_lhs: f64,
    pub lemma_rhs: f64,
    pub lemma_holds: bool,
    pub theorem_lhs: Option<f64>,
    pub theorem_rhs: Option<f64>,
    pub theorem_holds: Option<bool>,
    pub error_bound: f64,
    pub error_bound_holds: bool,
}

/// Filter rule for the surrogate trajectory.
#[derive(Debug, Clone)]
pub enum TheoryFilter<'a> {
    /// Always exclude these device positions.
    Fixed(Vec<usize>),
    /// Accuracy thresholds on a reserve set.
    Threshold {
        reserve: &'a LabeledDataset,
        coeffs: PenaltyCoeffs,
    },
}

/// Federated run on the surrogate: every device takes one full-batch
/// gradient step of size `eta` from the broadcast model; the server averages
/// the kept devices (data-weighted) and, for comparison, all devices.
pub fn surrogate_trajectory(
    shards: &[LabeledDataset],
    lambda: f64,
    eta: f64,
    rounds: usize,
    filter: &TheoryFilter<'_>,
) -> Result<Vec<TrajectoryStep>> {
    let first = shards.first().ok_or_else(|| Error::Config("no shards".into()))?;
    let input = 2 * first.length();
    let classes = first.class_count;
    let objectives: Vec<Surrogate> = shards
        .iter()
        .map(|s| Surrogate::new(input, classes, s.samples.iter().collect(), lambda))
        .collect();
    let sizes: Vec<usize> = shards.iter().map(LabeledDataset::len).collect();
    let arch = ArchSpec::linear(input, classes);
    let k = shards.len();
    let mut w = vec![0.0; arch.param_count()];
    let mut steps = Vec::with_capacity(rounds);
    for round in 0..rounds {
        let grads = objectives.iter().map(|o| o.grad(&w)).collect::<Result<Vec<_>>>()?;
        let models = grads
            .iter()
            .map(|g| {
                ModelParams::unflatten(
                    arch.clone(),
                    &w.iter().zip(g).map(|(a, b)| a - eta * b).collect::<Vec<_>>(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let filtered: Vec<usize> = match filter {
            TheoryFilter::Fixed(f) => f.clone(),
            TheoryFilter::Threshold { reserve, coeffs } => {
                let global = ModelParams::unflatten(arch.clone(), &w)?;
                let xi = accuracy(&global, reserve)?;
                let logits = models
                    .iter()
                    .map(|m| extract_logits(m, reserve))
                    .collect::<Result<Vec<_>>>()?;
                let zeta = avg_distance_from_matrix(&distance_matrix(&logits)?, classes, None)?;
                let th = threshold(xi, penalty(zeta, coeffs));
                let below: Vec<usize> = (0..k)
                    .filter(|&i| accuracy(&models[i], reserve).map(|a| a < th).unwrap_or(false))
                    .collect();
                // a round that would drop everyone keeps everyone
                if below.len() == k {
                    Vec::new()
                } else {
                    below
                }
            }
        };
        let kept: Vec<usize> = (0..k).filter(|i| !filtered.contains(i)).collect();
        if kept.is_empty() {
            return Err(Error::AllFiltered);
        }
        let kept_models: Vec<ModelParams> = kept.iter().map(|&i| models[i].clone()).collect();
        let kept_sizes: Vec<usize> = kept.iter().map(|&i| sizes[i]).collect();
        let w_next = weighted_mean(&kept_models, &kept_sizes)?.flatten();
        let w_hat_next = weighted_mean(&models, &sizes)?.flatten();
        let kept_g: Vec<Vec<f64>> = kept.iter().map(|&i| grads[i].clone()).collect();
        let drop_g: Vec<Vec<f64>> = filtered.iter().map(|&i| grads[i].clone()).collect();
        let e = gradient_loss_differential(&kept_g, &drop_g)?;
        let mean_g: Vec<f64> = (0..w.len())
            .map(|j| grads.iter().map(|g| g[j]).sum::<f64>() / k as f64)
            .collect();
        let device_deviation = grads.iter().map(|g| norm(&sub(g, &mean_g))).collect();
        steps.push(TrajectoryStep {
            round,
            w: w.clone(),
            w_next: w_next.clone(),
            w_hat_next,
            e,
            filtered,
            device_deviation,
        });
        w = w_next;
    }
    Ok(steps)
}

/// Gradient descent on `obj` with step `1/rho` until `‖∇‖ < tol` or
/// `max_steps`. Returns the minimizer estimate and its gradient norm.
pub fn minimize<O: Objective>(obj: &O, rho: f64, max_steps: usize, tol: f64) -> Result<(Vec<f64>, f64)> {
    let mut w = vec![0.0; obj.dim()];
    let mut g = obj.grad(&w)?;
    for _ in 0..max_steps {
        if norm(&g) < tol {
            break;
        }
        for (wi, gi) in w.iter_mut().zip(&g) {
            *wi -= gi / rho;
        }
        g = obj.grad(&w)?;
    }
    let gn = norm(&g);
    Ok((w, gn))
}

/// Evaluates the lemma, the optimality-gap bound and the error bound along a
/// trajectory. `optimum` is `(w*, ℒ(w*))`; theorem checks are skipped when
/// it is absent is an error, and when `mu` is zero they are skipped.
pub fn check_optimality_gap<O: Objective>(
    obj: &O,
    trajectory: &[TrajectoryStep],
    rho: f64,
    mu: f64,
    optimum: Option<f64>,
    sizes: &[usize],
    gamma: &[f64],
) -> Result<Vec<GapRecord>> {
    let loss_star = optimum.ok_or_else(|| Error::Config("optimality gap needs the optimum loss".into()))?;
    let ratio = mu / rho;
    let mut out = Vec::new();
    for t in 1..trajectory.len() {
        let step = &trajectory[t];
        let prev = &trajectory[t - 1];
        // ŵᵗ and wᵗ are the two aggregates produced in round t−1
        let w = &step.w;
        let w_hat = &prev.w_hat_next;
        let w_hat_prev = if t >= 2 {
            &trajectory[t - 2].w_hat_next
        } else {
            &trajectory[0].w
        };
        let zeta = zeta_gap(w_hat, w)?;
        let grad = obj.grad(w)?;
        let loss_w = obj.loss(w)?;
        let lemma = check_lemma_gap(obj.loss(w_hat)?, loss_w, &zeta, &grad, rho);
        let e_norm = norm(&step.e);
        let (theorem_lhs, theorem_rhs, theorem_holds) = if mu > 0.0 {
            let lhs = obj.loss(&step.w_next)? - loss_star;
            let rhs = loss_w - loss_star
                + ratio * lemma.rhs
                + ratio * (1.0 - ratio) * (loss_star - obj.loss(w_hat_prev)?)
                + e_norm * e_norm / (2.0 * rho);
            (Some(lhs), Some(rhs), Some(lhs <= rhs + 1e-9))
        } else {
            (None, None, None)
        };
        let kept: Vec<usize> = (0..sizes.len()).filter(|i| !step.filtered.contains(i)).collect();
        let error_bound = kept.iter().map(|&q| gamma[q] / (sizes[q] as f64).sqrt()).sum::<f64>() / kept.len() as f64;
        out.push(GapRecord {
            round: step.round,
            filtered: step.filtered.clone(),
            zeta_norm: norm(&zeta),
            e_norm,
            lemma_lhs: lemma.lhs,
            lemma_rhs: lemma.rhs,
            lemma_holds: lemma.holds,
            theorem_lhs,
            theorem_rhs,
            theorem_holds,
            error_bound,
            error_bound_holds: e_norm <= error_bound + 1e-9,
        });
    }
    Ok(out)
}

/// `γ_q = max_t √D_q·‖∇ℒ(D_q, wᵗ) − ∇ℒ(wᵗ)‖`.
pub fn fit_gamma(trajectory: &[TrajectoryStep], sizes: &[usize]) -> Vec<f64> {
    (0..sizes.len())
        .map(|q| {
            trajectory
                .iter()
                .map(|s| s.device_deviation[q] * (sizes[q] as f64).sqrt())
                .fold(0.0, f64::max)
        })
        .collect()
}

/// Median `‖eᵗ‖` at two shard sizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorScaling {
    pub base_size: usize,
    pub scaled_size: usize,
    pub median_base: f64,
    pub median_scaled: f64,
    /// `median_scaled / median_base`.
    pub ratio: f64,
    /// CLT prediction `√(base/scaled)`.
    pub expected: f64,
    /// Ratio within ±50% of the prediction.
    pub within_tolerance: bool,
}

pub fn check_error_bound(
    base: &[TrajectoryStep],
    scaled: &[TrajectoryStep],
    base_size: usize,
    scaled_size: usize,
) -> ErrorScaling {
    let med = |steps: &[TrajectoryStep]| {
        let mut v: Vec<f64> = steps.iter().map(|s| norm(&s.e)).collect();
        v.sort_by(f64::total_cmp);
        if v.is_empty() {
            0.0
        } else if v.len() % 2 == 1 {
            v[v.len() / 2]
        } else {
            0.5 * (v[v.len() / 2 - 1] + v[v.len() / 2])
        }
    };
    let median_base = med(base);
    let median_scaled = med(scaled);
    let ratio = if median_base > 0.0 {
        median_scaled / median_base
    } else {
        0.0
    };
    let expected = (base_size as f64 / scaled_size as f64).sqrt();
    ErrorScaling {
        base_size,
        scaled_size,
        median_base,
        median_scaled,
        ratio,
        expected,
        within_tolerance: median_base > 0.0 && (ratio - expected).abs() <= 0.5 * expected,
    }
}

/// Contents of `theory_report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub seed: u64,
    pub rho: f64,
    pub mu: f64,
    pub eta: f64,
    pub lambda: f64,
    pub devices: usize,
    pub shard_size: usize,
    pub optimum_loss: f64,
    pub optimum_grad_norm: f64,
    pub records: Vec<GapRecord>,
    pub lemma_pass_rate: f64,
    pub theorem_pass_rate: Option<f64>,
    pub error_bound_pass_rate: f64,
    pub gamma_q: Vec<f64>,
    pub error_scaling: ErrorScaling,
    pub warnings: Vec<String>,
}

/// Builds clean i.i.d. shards of `shard_size` and `scale·shard_size`
/// samples per device, runs both trajectories and evaluates every check.
pub fn run_theory(cfg: &ExperimentConfig, seed: u64) -> Result<TheoryReport> {
    let th = &cfg.theory;
    let shard_size = th.shard_size;
    let k = cfg.devices;
    if th.policy == FilterPolicy::Fixed && th.filtered >= k {
        return Err(Error::Validation(
            "theory must keep at least one unfiltered device".into(),
        ));
    }
    let scaled_size = shard_size * th.scale_factor;
    let ds = &cfg.dataset;
    let cells = ds.schemes.len() * ds.snr_db.len();
    let reserve_size = cfg.reserve_size();
    let needed = k * scaled_size + reserve_size;
    let per_class = needed.div_ceil(cells);
    let full = build_dataset(
        &ds.schemes,
        per_class,
        &ds.snr_db,
        ds.length,
        ds.channel,
        &mut stream(seed, Domain::Theory, 0),
    )?;
    let mut parts = partition_iid(
        &full,
        needed.div_ceil(reserve_size.max(1)).max(2),
        &mut stream(seed, Domain::Theory, 1),
    )?;
    let reserve = parts.remove(0);
    let mut pool = LabeledDataset::empty(full.class_count);
    for p in parts {
        pool.extend(p);
    }
    if pool.len() < k * scaled_size {
        return Err(Error::InsufficientData("theory pool too small".into()));
    }
    let scaled_pool = pool.subset(&(0..k * scaled_size).collect::<Vec<_>>());
    let scaled_shards = partition_iid(&scaled_pool, k, &mut stream(seed, Domain::Theory, 2))?;
    // base shards are the first `shard_size` samples of each scaled shard
    let base_shards: Vec<LabeledDataset> = scaled_shards
        .iter()
        .map(|s| s.subset(&(0..shard_size).collect::<Vec<_>>()))
        .collect();

    let mut warnings = Vec::new();
    let input = 2 * ds.length;
    let classes = full.class_count;
    let pooled: Vec<&SignalSample> = base_shards.iter().flat_map(|s| s.samples.iter()).collect();
    let objective = Surrogate::new(input, classes, pooled, th.lambda);
    let smooth = estimate_smoothness(&objective, th.sample_pairs, &mut stream(seed, Domain::Theory, 3))?;
    if smooth.mu == 0.0 {
        warnings.push("lambda is zero: strong convexity fails and theorem checks are skipped".into());
    }
    let eta = 1.0 / smooth.rho;
    let filter = match th.policy {
        FilterPolicy::Fixed => TheoryFilter::Fixed((0..th.filtered).collect()),
        FilterPolicy::Threshold => TheoryFilter::Threshold {
            reserve: &reserve,
            coeffs: cfg.defense_config().coeffs,
        },
    };
    let base = surrogate_trajectory(&base_shards, th.lambda, eta, th.rounds, &filter)?;
    let scaled_pooled: Vec<&SignalSample> = scaled_shards.iter().flat_map(|s| s.samples.iter()).collect();
    let scaled_obj = Surrogate::new(input, classes, scaled_pooled, th.lambda);
    let scaled_eta = 1.0 / estimate_smoothness(&scaled_obj, th.sample_pairs, &mut stream(seed, Domain::Theory, 4))?.rho;
    let scaled = surrogate_trajectory(&scaled_shards, th.lambda, scaled_eta, th.rounds, &filter)?;

    let (w_star, grad_norm) = minimize(&objective, smooth.rho, th.optimum_steps, th.optimum_tol)?;
    if grad_norm >= th.optimum_tol {
        warnings.push(format!(
            "optimum not converged: gradient norm {grad_norm:e} after {} steps",
            th.optimum_steps
        ));
    }
    let loss_star = objective.loss(&w_star)?;
    let sizes: Vec<usize> = base_shards.iter().map(LabeledDataset::len).collect();
    let gamma = fit_gamma(&base, &sizes);
    let records = check_optimality_gap(
        &objective,
        &base,
        smooth.rho,
        smooth.mu,
        Some(loss_star),
        &sizes,
        &gamma,
    )?;
    let rate = |f: &dyn Fn(&GapRecord) -> Option<bool>| {
        let v: Vec<bool> = records.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| v.iter().filter(|b| **b).count() as f64 / v.len() as f64)
    };
    Ok(TheoryReport {
        seed,
        rho: smooth.rho,
        mu: smooth.mu,
        eta,
        lambda: th.lambda,
        devices: k,
        shard_size,
        optimum_loss: loss_star,
        optimum_grad_norm: grad_norm,
        lemma_pass_rate: rate(&|r| Some(r.lemma_holds)).unwrap_or(1.0),
        theorem_pass_rate: rate(&|r| r.theorem_holds),
        error_bound_pass_rate: rate(&|r| Some(r.error_bound_holds)).unwrap_or(1.0),
        records,
        gamma_q: gamma,
        error_scaling: check_error_bound(&base, &scaled, shard_size, scaled_size),
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sigsyn::{Channel, Modulation};
    use proptest::prelude::{prop_assert, proptest};

    fn shards(k: usize, per: usize, seed: u64) -> Vec<LabeledDataset> {
        let ds = build_dataset(
            &Modulation::ALL[..4],
            (k * per).div_ceil(8),
            &[8.0, 10.0],
            8,
            Channel::Rayleigh,
            &mut stream(seed, Domain::Dataset, 0),
        )
        .unwrap();
        let sub = ds.subset(&(0..k * per).collect::<Vec<_>>());
        partition_iid(&sub, k, &mut stream(seed, Domain::Partition, 0)).unwrap()
    }

    #[test]
    fn quadratic_smoothness() {
        let q = Quadratic { dim: 5, curvature: 1.0 };
        let s = estimate_smoothness(&q, 16, &mut stream(1, Domain::Theory, 0)).unwrap();
        assert!((1.0..=1.5 + 1e-9).contains(&s.rho), "rho {}", s.rho);
        assert_eq!(s.mu, 1.0);
    }

    #[test]
    fn surrogate_mu_is_lambda() {
        let sh = shards(2, 20, 1);
        let obj = Surrogate::new(16, 4, sh[0].samples.iter().collect(), 0.03);
        let s = estimate_smoothness(&obj, 16, &mut stream(1, Domain::Theory, 0)).unwrap();
        assert_eq!(s.mu, 0.03);
        assert!(s.rho > s.mu);
        let zero = Surrogate::new(16, 4, sh[0].samples.iter().collect(), 0.0);
        assert_eq!(
            estimate_smoothness(&zero, 4, &mut stream(1, Domain::Theory, 0))
                .unwrap()
                .mu,
            0.0
        );
    }

    #[test]
    fn network_requires_surrogate() {
        let sh = shards(1, 10, 1);
        let obj = NetworkLoss {
            arch: ArchSpec::mlp(8, vec![4], 4),
            data: sh[0].samples.iter().collect(),
        };
        assert!(matches!(
            estimate_smoothness(&obj, 4, &mut stream(1, Domain::Theory, 0)),
            Err(Error::SurrogateRequired(_))
        ));
    }

    #[test]
    fn smoothness_is_monotone_in_pairs() {
        let sh = shards(1, 30, 2);
        let obj = Surrogate::new(16, 4, sh[0].samples.iter().collect(), 0.01);
        let mut last = 0.0;
        for pairs in [1, 4, 8, 16, 32] {
            let r = estimate_smoothness(&obj, pairs, &mut stream(3, Domain::Theory, 0))
                .unwrap()
                .rho;
            assert!(r >= last);
            last = r;
        }
    }

    #[test]
    fn zeta_examples() {
        // (D, w) = (10,3), (10,9), (20,6); drop device 2 → ŵ = 6, w = 5
        let p = |v: f64| ModelParams::unflatten(ArchSpec::linear(1, 1), &[v, 0.0]).unwrap();
        let all = weighted_mean(&[p(3.0), p(9.0), p(6.0)], &[10, 10, 20]).unwrap();
        let kept = weighted_mean(&[p(3.0), p(6.0)], &[10, 20]).unwrap();
        let z = zeta_gap(all.as_slice(), kept.as_slice()).unwrap();
        assert!((z[0] - 1.0).abs() < 1e-12);
        let back = zeta_gap(kept.as_slice(), all.as_slice()).unwrap();
        assert_eq!(back[0], -z[0]);
        assert_eq!(zeta_gap(all.as_slice(), all.as_slice()).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn differential_examples() {
        assert_eq!(
            gradient_loss_differential(&[vec![4.0]], &[vec![2.0]]).unwrap(),
            vec![1.0]
        );
        let none = gradient_loss_differential(&[vec![1.0, 2.0], vec![3.0, -1.0]], &[]).unwrap();
        assert_eq!(none, vec![0.0, 0.0]);
        assert!(gradient_loss_differential(&[], &[vec![1.0]]).is_err());
    }

    proptest! {
        #[test]
        fn differential_forms_agree(
            kept in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 3), 1..6),
            dropped in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 3), 0..5),
        ) {
            let a = gradient_loss_differential(&kept, &dropped).unwrap();
            let b = gradient_loss_differential_rearranged(&kept, &dropped).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn lemma_is_tight_on_quadratic() {
        let q = Quadratic { dim: 3, curvature: 1.0 };
        let w = [0.5, -1.0, 2.0];
        let zeta = [0.3, 0.2, -0.7];
        let w_hat: Vec<f64> = w.iter().zip(&zeta).map(|(a, b)| a + b).collect();
        let c = check_lemma_gap(
            q.loss(&w_hat).unwrap(),
            q.loss(&w).unwrap(),
            &zeta,
            &q.grad(&w).unwrap(),
            1.0,
        );
        assert!((c.lhs - c.rhs).abs() < 1e-9);
        assert!(c.holds);
        let zero = check_lemma_gap(1.0, 1.0, &[0.0; 3], &[1.0; 3], 2.0);
        assert_eq!((zero.lhs, zero.rhs, zero.holds), (0.0, 0.0, true));
    }

    #[test]
    fn trajectory_follows_expanded_update() {
        let sh = shards(4, 20, 4);
        let eta = 0.5;
        let steps = surrogate_trajectory(&sh, 0.01, eta, 3, &TheoryFilter::Fixed(vec![1])).unwrap();
        let objs: Vec<Surrogate> = sh
            .iter()
            .map(|s| Surrogate::new(16, 4, s.samples.iter().collect(), 0.01))
            .collect();
        for s in &steps {
            let grads: Vec<Vec<f64>> = objs.iter().map(|o| o.grad(&s.w).unwrap()).collect();
            for j in 0..s.w.len() {
                let mean_g = grads.iter().map(|g| g[j]).sum::<f64>() / 4.0;
                let want = s.w[j] - eta * (mean_g + s.e[j]);
                assert!((s.w_next[j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn no_filtering_means_zero_gaps() {
        let sh = shards(3, 20, 5);
        let steps = surrogate_trajectory(&sh, 0.01, 0.5, 4, &TheoryFilter::Fixed(vec![])).unwrap();
        let pooled: Vec<&SignalSample> = sh.iter().flat_map(|s| s.samples.iter()).collect();
        let obj = Surrogate::new(16, 4, pooled, 0.01);
        let sizes = vec![20; 3];
        let gamma = fit_gamma(&steps, &sizes);
        let recs = check_optimality_gap(&obj, &steps, 2.0, 0.01, Some(0.0), &sizes, &gamma).unwrap();
        for r in recs {
            assert_eq!(r.zeta_norm, 0.0);
            assert_eq!(r.e_norm, 0.0);
            assert_eq!((r.lemma_lhs, r.lemma_rhs), (0.0, 0.0));
        }
        assert!(check_optimality_gap(&obj, &steps, 2.0, 0.01, None, &sizes, &gamma).is_err());
    }

    #[test]
    fn minimize_reaches_stationary_point() {
        let sh = shards(1, 40, 6);
        let obj = Surrogate::new(16, 4, sh[0].samples.iter().collect(), 0.1);
        let rho = estimate_smoothness(&obj, 32, &mut stream(1, Domain::Theory, 0))
            .unwrap()
            .rho;
        let (w, g) = minimize(&obj, rho, 5000, 1e-8).unwrap();
        assert!(g < 1e-8, "grad norm {g}");
        let p = ModelParams::unflatten(ArchSpec::linear(16, 4), &w).unwrap();
        assert!(p.is_finite());
    }
}
