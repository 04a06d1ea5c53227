//! Small-initialization escape and the rank-one trajectory it follows.
//!
//! A factorization started at `α·a` is run until its end tensor reaches the
//! sphere `‖W‖ = ρ`. From there it is compared against a single balanced
//! component started on the sphere in the direction of the largest
//! component, both driven by gradient descent with the same step size.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cp::{random_unit_vector, CpFactorization, CpGradient};
use crate::error::{Error, Result};
use crate::loss::{loss_gradient_tensor, LossKind, ObservationSet, Problem};
use crate::optim::{TrainConfig, Trainer};
use crate::rng::{self, Stream};
use crate::tensor::{vec_norm, Shape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub delta_h: f64,
    pub min_abs_target: f64,
    pub delta_below_targets: bool,
    pub unbalancedness: f64,
    pub balanced: bool,
    /// Component satisfying the leading-component condition, if any.
    pub leading: Option<usize>,
    /// `⟨−∇L(0), ⊗â_r⟩` per component.
    pub origin_gammas: Vec<f64>,
    pub origin_gradient_norm: f64,
    pub failures: Vec<String>,
}

impl AssumptionReport {
    pub fn all_hold(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Checks the conditions under which small initialization is expected to
/// follow a rank-one trajectory: `δ_h < min|y|`, zero unbalancedness, and a
/// component `r̄` with `γ_r̄(0) > 0` whose vectors dominate all others by the
/// factor `(‖∇L(0)‖ / γ_r̄(0))^{1/(N−2)}`.
pub fn validate_assumptions(base: &CpFactorization, problem: &Problem, delta_h: f64) -> Result<AssumptionReport> {
    base.shape().expect_same(problem.shape())?;
    let kind = LossKind::Huber { delta: delta_h };
    kind.validate()?;
    let mut failures = Vec::new();
    let min_abs = problem.min_abs_target();
    let delta_ok = delta_h < min_abs;
    if !delta_ok {
        failures.push(format!("transition point {delta_h} is not below min |y| = {min_abs}"));
    }

    let unbalancedness = base.unbalancedness_magnitude();
    let scale = (0..base.rank())
        .flat_map(|r| base.vector_sq_norms(r))
        .fold(0.0f64, f64::max);
    let balanced = unbalancedness <= 1e-12 * scale.max(f64::MIN_POSITIVE);
    if !balanced {
        failures.push(format!("initialization is unbalanced (magnitude {unbalancedness:e})"));
    }

    let zero = CpFactorization::zeros(base.shape().clone(), 1)?;
    let g0 = loss_gradient_tensor(&zero, problem, kind)?;
    let g0_norm = g0.norm();
    let origin_gammas: Vec<f64> = (0..base.rank())
        .map(|r| {
            if base.component_norm(r) == 0.0 {
                0.0
            } else {
                -g0.inner_rank_one(&base.component_directions(r))
            }
        })
        .collect();

    let order = base.order();
    let norms: Vec<Vec<f64>> = (0..base.rank())
        .map(|r| base.vector_sq_norms(r).into_iter().map(f64::sqrt).collect())
        .collect();
    let leading = (0..base.rank()).find(|&rb| {
        let g = origin_gammas[rb];
        if !(g > 0.0) {
            return false;
        }
        let factor = if order > 2 {
            (g0_norm / g).powf(1.0 / (order as f64 - 2.0))
        } else {
            // With N = 2 the exponent is unbounded; any ratio above one
            // makes the condition unsatisfiable unless γ equals ‖∇L(0)‖.
            if g >= g0_norm {
                1.0
            } else {
                f64::INFINITY
            }
        };
        (0..base.rank())
            .filter(|&r| r != rb)
            .all(|r| (0..order).all(|n| norms[rb][n] > norms[r][n] * factor))
    });
    if leading.is_none() {
        failures.push("no component is leading at the origin".to_string());
    }

    Ok(AssumptionReport {
        delta_h,
        min_abs_target: min_abs,
        delta_below_targets: delta_ok,
        unbalancedness,
        balanced,
        leading,
        origin_gammas,
        origin_gradient_norm: g0_norm,
        failures,
    })
}

/// Checks `ρ ∈ (0, min|y| − δ_h)`.
pub fn validate_rho(rho: f64, problem: &Problem, delta_h: f64) -> Result<()> {
    let upper = problem.min_abs_target() - delta_h;
    if rho > 0.0 && rho < upper {
        Ok(())
    } else {
        Err(Error::config(format!("sphere radius {rho} must lie in (0, {upper})")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Crossing {
    pub crossed: bool,
    /// Iteration at which `‖W_e‖ ≥ ρ` first held (0 when it never did).
    pub iter: u64,
    /// Cumulative step size at the crossing (0 when it never did).
    pub time: f64,
    /// `‖W_e‖` at the crossing iterate.
    pub norm: f64,
}

/// First point of `(iter, time, ‖W_e‖)` with norm at least `rho`. When the
/// series never reaches the sphere the crossing time is 0 and flagged.
pub fn detect_crossing(series: impl IntoIterator<Item = (u64, f64, f64)>, rho: f64) -> Crossing {
    series
        .into_iter()
        .find(|&(_, _, norm)| norm >= rho)
        .map_or(
            Crossing {
                crossed: false,
                iter: 0,
                time: 0.0,
                norm: 0.0,
            },
            |(iter, time, norm)| Crossing {
                crossed: true,
                iter,
                time,
                norm,
            },
        )
}

/// Step-size control while escaping the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EscapeSchedule {
    /// Largest relative change of any weight vector per step.
    pub kappa: f64,
    pub max_lr: f64,
    pub max_steps: u64,
    /// Relative width of the band `[ρ, ρ(1 + tol)]` the crossing step is
    /// shortened to land in.
    pub landing_tol: f64,
}

impl Default for EscapeSchedule {
    fn default() -> Self {
        Self {
            kappa: 1e-4,
            max_lr: 1e3,
            max_steps: 1_000_000,
            landing_tol: 1e-14,
        }
    }
}

fn escape_lr(f: &CpFactorization, g: &CpGradient, schedule: &EscapeSchedule) -> f64 {
    let mut lr = schedule.max_lr;
    for r in 0..f.rank() {
        for n in 0..f.order() {
            let w = vec_norm(&f.vector(r, n));
            let gn = vec_norm(&g.block(r, n));
            if w > 0.0 && gn > 0.0 {
                lr = lr.min(schedule.kappa * w / gn);
            }
        }
    }
    lr
}

fn end_norm_after(f: &CpFactorization, g: &CpGradient, lr: f64) -> f64 {
    let mut next = f.clone();
    next.descend(g, lr);
    next.end_tensor().norm()
}

/// Runs gradient descent from the current state of `trainer` until the end
/// tensor reaches the sphere of radius `rho`, shortening the final step so
/// the crossing iterate lands just outside it. Time is cumulative step size.
pub fn escape_to_sphere(trainer: &mut Trainer, rho: f64, schedule: &EscapeSchedule) -> Result<Crossing> {
    let start = trainer.iter();
    loop {
        let norm = trainer.factorization().end_tensor().norm();
        if norm >= rho {
            return Ok(Crossing {
                crossed: true,
                iter: trainer.iter(),
                time: trainer.time(),
                norm,
            });
        }
        if trainer.iter() - start >= schedule.max_steps {
            return Ok(detect_crossing(std::iter::empty(), rho));
        }
        trainer.check_finite()?;
        let f = trainer.factorization().clone();
        let g = trainer.gradient()?.clone();
        let mut lr = escape_lr(&f, &g, schedule);
        if !(lr > 0.0) {
            // Nothing moves: every vector is zero or stationary.
            return Ok(detect_crossing(std::iter::empty(), rho));
        }
        let upper = rho * (1.0 + schedule.landing_tol);
        if end_norm_after(&f, &g, lr) > upper {
            let (mut lo, mut hi) = (0.0, lr);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                let n = end_norm_after(&f, &g, mid);
                if n < rho {
                    lo = mid;
                } else if n > upper {
                    hi = mid;
                } else {
                    hi = mid;
                    break;
                }
            }
            lr = hi;
        }
        trainer.step_with_lr(lr)?;
    }
}

/// Single balanced component on the sphere in the direction of the largest
/// component of `f`: every vector is scaled to norm `ρ^{1/N}`.
pub fn companion_rank_one_init(f: &CpFactorization, rho: f64) -> Result<(usize, CpFactorization)> {
    if !(rho > 0.0) {
        return Err(Error::config("sphere radius must be positive"));
    }
    let norms = f.component_norms();
    let leading = (0..f.rank())
        .max_by(|&a, &b| norms[a].total_cmp(&norms[b]))
        .ok_or(Error::Empty("factorization"))?;
    let scale = rho.powf(1.0 / f.order() as f64);
    let mut vectors = Vec::with_capacity(f.order());
    for n in 0..f.order() {
        let v = f.vector(leading, n);
        let norm = vec_norm(&v);
        if norm == 0.0 {
            return Err(Error::ZeroVector { component: leading, mode: n });
        }
        vectors.push(v.iter().map(|x| x * scale / norm).collect());
    }
    Ok((leading, CpFactorization::from_weights(f.shape().clone(), vec![vectors])?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: u64,
    pub time: f64,
    pub distance: f64,
    pub main_norm: f64,
    pub companion_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankOneTrace {
    pub alpha: f64,
    pub crossing: Crossing,
    /// Largest component at the crossing.
    pub leading: usize,
    /// Sum of the other component norms at the crossing.
    pub nonleading_norm_sum: f64,
    pub companion: CpFactorization,
    pub max_distance: f64,
    pub rows: Vec<TraceRow>,
}

impl RankOneTrace {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["step", "time", "distance", "main_norm", "companion_norm"])?;
        for r in &self.rows {
            w.write_record([
                r.step.to_string(),
                r.time.to_string(),
                r.distance.to_string(),
                r.main_norm.to_string(),
                r.companion_norm.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Steps both trainers in lockstep with their own (equal) fixed step sizes,
/// recording `‖W̄_e − W₁‖` until the shifted time reaches `horizon` or the
/// main end tensor reaches norm `cap`.
pub fn track_companion_distance(
    main: &mut Trainer,
    companion: &mut Trainer,
    horizon: f64,
    cap: f64,
    record_every: u64,
) -> Result<Vec<TraceRow>> {
    let t0 = main.time();
    let mut rows = Vec::new();
    let mut step = 0u64;
    loop {
        let we = main.factorization().end_tensor();
        let w1 = companion.factorization().end_tensor();
        let main_norm = we.norm();
        let time = main.time() - t0;
        let last = time >= horizon || main_norm >= cap;
        if last || step % record_every.max(1) == 0 {
            rows.push(TraceRow {
                step,
                time,
                distance: we.sub(&w1)?.norm(),
                main_norm,
                companion_norm: w1.norm(),
            });
        }
        if last {
            return Ok(rows);
        }
        main.step()?;
        companion.step()?;
        step += 1;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankOneExperimentConfig {
    pub rho: f64,
    pub alphas: Vec<f64>,
    pub base_init: CpFactorization,
    pub horizon: f64,
    pub distance_cap: f64,
    pub delta_h: f64,
    pub track_lr: f64,
    #[serde(default = "default_trace_every")]
    pub trace_every: u64,
    #[serde(default)]
    pub escape: EscapeSchedule,
}

fn default_trace_every() -> u64 {
    1
}

impl RankOneExperimentConfig {
    pub fn validate(&self, problem: &Problem) -> Result<()> {
        validate_rho(self.rho, problem, self.delta_h)?;
        if self.alphas.is_empty() || self.alphas.iter().any(|&a| !(a > 0.0)) {
            return Err(Error::config("initialization scales must be positive"));
        }
        if self.alphas.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::config("initialization scales must be strictly decreasing"));
        }
        if !(self.horizon > 0.0 && self.distance_cap > 0.0 && self.track_lr > 0.0) {
            return Err(Error::config("horizon, distance cap and tracking step size must be positive"));
        }
        if !(self.escape.kappa > 0.0 && self.escape.max_lr > 0.0) {
            return Err(Error::config("escape schedule must have positive kappa and max_lr"));
        }
        Ok(())
    }
}

/// Escape, companion construction and tracking for one scale `alpha`.
pub fn run_rank_one(config: &RankOneExperimentConfig, problem: Arc<Problem>, alpha: f64) -> Result<RankOneTrace> {
    config.validate(&problem)?;
    let kind = LossKind::Huber { delta: config.delta_h };
    let init = config.base_init.scaled(alpha);
    if init.end_tensor().norm() >= config.rho {
        return Err(Error::config(format!(
            "scaled initialization (alpha = {alpha}) already lies outside the sphere"
        )));
    }
    let mut escape = Trainer::new(init, problem.clone(), kind, TrainConfig::fixed(config.track_lr, u64::MAX))?;
    let crossing = escape_to_sphere(&mut escape, config.rho, &config.escape)?;
    let at_t0 = escape.into_factorization();
    let (leading, companion) = companion_rank_one_init(&at_t0, config.rho)?;
    let nonleading_norm_sum = at_t0
        .component_norms()
        .iter()
        .enumerate()
        .filter(|&(r, _)| r != leading)
        .map(|(_, s)| s)
        .sum();

    let track = TrainConfig::fixed(config.track_lr, u64::MAX);
    let mut main = Trainer::new(at_t0, problem.clone(), kind, track.clone())?;
    let mut comp = Trainer::new(companion.clone(), problem, kind, track)?;
    let rows = track_companion_distance(
        &mut main,
        &mut comp,
        config.horizon,
        config.distance_cap,
        config.trace_every,
    )?;
    let max_distance = rows.iter().map(|r| r.distance).fold(0.0, f64::max);
    Ok(RankOneTrace {
        alpha,
        crossing,
        leading,
        nonleading_norm_sum,
        companion,
        max_distance,
        rows,
    })
}

/// `run_rank_one` over every configured scale, in parallel.
pub fn alpha_sweep(config: &RankOneExperimentConfig, problem: &Problem) -> Result<Vec<RankOneTrace>> {
    config.validate(problem)?;
    let problem = Arc::new(problem.clone());
    config
        .alphas
        .par_iter()
        .map(|&a| run_rank_one(config, problem.clone(), a))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SphereStartReport {
    pub alpha: f64,
    pub tolerance: f64,
    pub full_min_distance: f64,
    pub full_final_distance: f64,
    pub companion_min_distances: Vec<f64>,
    pub companion_final_distances: Vec<f64>,
    /// Companions whose first vector was negated so they start with a
    /// positive pull from the origin.
    pub flipped: usize,
    pub pass: bool,
}

/// Runs the full factorization from `alpha · base` and `companions` random
/// balanced single components started on the sphere, each for cumulative
/// time `horizon` after reaching the sphere, and reports distances to
/// `target`. A random start pointing against `−∇L(0)` decays towards the
/// origin, so its first vector is negated.
#[allow(clippy::too_many_arguments)]
pub fn sphere_start_probe(
    config: &RankOneExperimentConfig,
    problem: &Problem,
    target: &Tensor,
    alpha: f64,
    companions: usize,
    seed: u64,
    tolerance: f64,
) -> Result<SphereStartReport> {
    config.validate(problem)?;
    problem.shape().expect_same(target.shape())?;
    let kind = LossKind::Huber { delta: config.delta_h };
    let problem = Arc::new(problem.clone());
    let track = TrainConfig::fixed(config.track_lr, u64::MAX);

    let distances = |trainer: &mut Trainer| -> Result<(f64, f64)> {
        let t0 = trainer.time();
        let mut min = f64::INFINITY;
        loop {
            let d = trainer.factorization().end_tensor().sub(target)?.norm();
            min = min.min(d);
            if trainer.time() - t0 >= config.horizon {
                return Ok((min, d));
            }
            trainer.step()?;
        }
    };

    let mut full = Trainer::new(config.base_init.scaled(alpha), problem.clone(), kind, track.clone())?;
    escape_to_sphere(&mut full, config.rho, &config.escape)?;
    let (full_min, full_final) = distances(&mut full)?;

    let zero = CpFactorization::zeros(problem.shape().clone(), 1)?;
    let g0 = loss_gradient_tensor(&zero, &problem, kind)?;
    let mut rng = rng::stream(seed, Stream::Companion);
    let scale = config.rho.powf(1.0 / problem.shape().order() as f64);
    let mut starts = Vec::with_capacity(companions);
    let mut flipped = 0;
    for _ in 0..companions {
        let mut vectors: Vec<Vec<f64>> = problem
            .shape()
            .dims()
            .iter()
            .map(|&d| random_unit_vector(&mut rng, d))
            .collect();
        if g0.inner_rank_one(&vectors) > 0.0 {
            vectors[0].iter_mut().for_each(|x| *x = -*x);
            flipped += 1;
        }
        for v in &mut vectors {
            v.iter_mut().for_each(|x| *x *= scale);
        }
        starts.push(CpFactorization::from_weights(problem.shape().clone(), vec![vectors])?);
    }
    let results: Vec<(f64, f64)> = starts
        .into_par_iter()
        .map(|f| {
            let mut t = Trainer::new(f, problem.clone(), kind, track.clone())?;
            distances(&mut t)
        })
        .collect::<Result<_>>()?;

    let pass = full_min <= tolerance && results.iter().all(|&(m, _)| m <= tolerance);
    Ok(SphereStartReport {
        alpha,
        tolerance,
        full_min_distance: full_min,
        full_final_distance: full_final,
        companion_min_distances: results.iter().map(|r| r.0).collect(),
        companion_final_distances: results.iter().map(|r| r.1).collect(),
        flipped,
        pass,
    })
}

/// A rank-one target whose vectors have entries of magnitude in `[1, 2]`
/// with random signs, so every entry is at least 1 in magnitude.
pub fn separated_rank_one_target(shape: &Shape, seed: u64) -> Result<CpFactorization> {
    let mut rng = rng::stream(seed, Stream::GroundTruth);
    let vectors: Vec<Vec<f64>> = shape
        .dims()
        .iter()
        .map(|&d| {
            (0..d)
                .map(|_| {
                    let m: f64 = rng.gen_range(1.0..2.0);
                    if rng.gen_bool(0.5) {
                        m
                    } else {
                        -m
                    }
                })
                .collect()
        })
        .collect();
    CpFactorization::from_weights(shape.clone(), vec![vectors])
}

/// Balanced random initialization with one component made leading: the
/// component with the largest pull from the origin keeps its scale and all
/// others are shrunk so the dominance factor is exceeded by `margin`.
pub fn leading_base_init(problem: &Problem, delta_h: f64, rank: usize, std: f64, margin: f64, seed: u64) -> Result<CpFactorization> {
    if !(margin > 1.0) {
        return Err(Error::config("margin must exceed 1"));
    }
    let f = crate::cp::initialize(&crate::cp::InitSpec::balanced_gaussian(std, seed), problem.shape(), rank)?;
    let report = validate_assumptions(&f, problem, delta_h)?;
    let order = f.order() as f64;
    let (best, &g) = report
        .origin_gammas
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .ok_or(Error::Empty("factorization"))?;
    let mut weights = f.weights();
    if !(g > 0.0) {
        // Flip the best-aligned direction.
        let (worst, _) = report
            .origin_gammas
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .ok_or(Error::Empty("factorization"))?;
        weights[worst][0].iter_mut().for_each(|x| *x = -*x);
        return leading_from(weights, problem, delta_h, worst, -report.origin_gammas[worst], order, margin, report.origin_gradient_norm);
    }
    leading_from(weights, problem, delta_h, best, g, order, margin, report.origin_gradient_norm)
}

#[allow(clippy::too_many_arguments)]
fn leading_from(
    mut weights: Vec<Vec<Vec<f64>>>,
    problem: &Problem,
    delta_h: f64,
    leading: usize,
    gamma: f64,
    order: f64,
    margin: f64,
    g0_norm: f64,
) -> Result<CpFactorization> {
    let factor = if order > 2.0 { (g0_norm / gamma).powf(1.0 / (order - 2.0)) } else { 1.0 };
    let lead_min = weights[leading]
        .iter()
        .map(|v| vec_norm(v))
        .fold(f64::INFINITY, f64::min);
    for (r, comp) in weights.iter_mut().enumerate() {
        if r == leading {
            continue;
        }
        let other_max = comp.iter().map(|v| vec_norm(v)).fold(0.0, f64::max);
        if other_max == 0.0 {
            continue;
        }
        let s = (lead_min / (other_max * factor * margin)).min(1.0);
        for v in comp.iter_mut() {
            v.iter_mut().for_each(|x| *x *= s);
        }
    }
    let f = CpFactorization::from_weights(problem.shape().clone(), weights)?;
    let report = validate_assumptions(&f, problem, delta_h)?;
    debug_assert_eq!(report.leading, Some(leading));
    Ok(f)
}

/// Full observation set of a rank-one target, as used by the desk runs.
pub fn full_problem(target: &CpFactorization) -> Problem {
    Problem::Completion(ObservationSet::full(&target.end_tensor()))
}
