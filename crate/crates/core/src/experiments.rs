//! Experiment configurations and runners shared by the command-line tool
//! and the acceptance suite. Every runner is a pure function of its config
//! at the file level; wall-clock timings go to separate `timings.csv` files
//! so the remaining CSVs are reproducible byte for byte.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cp::{initialize, CpFactorization, InitSpec};
use crate::dynamics::{
    check_balancedness_conservation, check_norm_ode, check_rate_bounds, incremental_windows,
    relative_bound_excursion, windows_are_ordered, DynamicsCheckReport,
};
use crate::error::{Error, Result};
use crate::loss::{LossKind, Problem};
use crate::optim::{train, train_with, write_trajectory_csv, LrScheme, NormColumns, StopReason, TrainConfig};
use crate::problems::{
    estimate_rip_delta, generate_ground_truth, sample_measurements, sample_observations, GroundTruthSpec, RipEstimate,
};
use crate::rank_one::{
    alpha_sweep, sphere_start_probe, full_problem, leading_base_init, separated_rank_one_target, validate_assumptions,
    AssumptionReport, SphereStartReport, EscapeSchedule, RankOneExperimentConfig, RankOneTrace,
};
use crate::tensor::Shape;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProblemSpec {
    Completion { observations: usize },
    Sensing { measurements: usize },
}

/// Low-rank recovery from a small initialization: synthetic ground truth,
/// sampled entries or measurements, one training run per init scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryConfig {
    pub shape: Vec<usize>,
    pub gt_rank: usize,
    pub problem: ProblemSpec,
    pub rank: usize,
    pub init_stds: Vec<f64>,
    pub loss: LossKind,
    pub train: TrainConfig,
    /// Largest component norms written per trajectory row.
    #[serde(default = "default_top_norms")]
    pub top_norms: usize,
    /// Random rank-one probes for the RIP estimate (sensing only).
    #[serde(default)]
    pub rip_trials: usize,
    pub seed: u64,
}

fn default_top_norms() -> usize {
    10
}

impl RecoveryConfig {
    pub fn validate(&self) -> Result<()> {
        let shape = Shape::new(self.shape.clone())?;
        if self.gt_rank == 0 || self.rank == 0 {
            return Err(Error::config("ranks must be positive"));
        }
        if self.rank <= self.gt_rank {
            return Err(Error::config("the factorization rank must exceed the ground-truth rank"));
        }
        match self.problem {
            ProblemSpec::Completion { observations } if observations == 0 || observations > shape.numel() => {
                return Err(Error::config(format!(
                    "observation count must lie in 1..={}",
                    shape.numel()
                )))
            }
            ProblemSpec::Sensing { measurements: 0 } => return Err(Error::config("measurement count must be positive")),
            _ => {}
        }
        if self.init_stds.is_empty() || self.init_stds.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::config("init scales must be positive"));
        }
        self.loss.validate()?;
        self.train.validate()
    }

    pub fn build(&self) -> Result<(Arc<crate::tensor::Tensor>, Arc<Problem>)> {
        let shape = Shape::new(self.shape.clone())?;
        let gt = generate_ground_truth(&GroundTruthSpec::new(shape, self.gt_rank, self.seed))?;
        let problem = match self.problem {
            ProblemSpec::Completion { observations } => {
                Problem::Completion(sample_observations(&gt, observations, self.seed)?)
            }
            ProblemSpec::Sensing { measurements } => Problem::Sensing(sample_measurements(&gt, measurements, self.seed)?),
        };
        Ok((Arc::new(gt), Arc::new(problem)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryRun {
    pub init_std: f64,
    pub stop: StopReason,
    pub iters: u64,
    pub time: f64,
    pub final_loss: f64,
    pub reconstruction_error: f64,
    /// Component norms, largest first.
    pub sorted_norms: Vec<f64>,
    /// `(R*+1)`-th largest norm over the `R*`-th.
    pub gap_ratio: f64,
    /// Whether the leading `R*` components finish their growth in order.
    pub incremental: bool,
    #[serde(skip)]
    pub wall_time: f64,
}

impl RecoveryRun {
    pub fn diverged(&self) -> bool {
        matches!(self.stop, StopReason::Diverged { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub runs: Vec<RecoveryRun>,
    pub rip: Option<RipEstimate>,
}

/// Trains from every init scale (in parallel) and, when `out` is given,
/// writes `trajectory_{i}.csv`, `factorization_{i}.json`, `summary.csv`
/// and `timings.csv`.
pub fn run_recovery(config: &RecoveryConfig, out: Option<&Path>) -> Result<RecoveryReport> {
    config.validate()?;
    let (gt, problem) = config.build()?;
    let shape = problem.shape().clone();
    let rip = match (&*problem, config.rip_trials) {
        (Problem::Sensing(m), n) if n > 0 => Some(estimate_rip_delta(m, 1, n, config.seed)?),
        _ => None,
    };
    let runs: Vec<RecoveryRun> = config
        .init_stds
        .par_iter()
        .enumerate()
        .map(|(i, &std)| {
            let start = Instant::now();
            let f = initialize(&InitSpec::gaussian(std, config.seed), &shape, config.rank)?;
            let outcome = train_with(f, problem.clone(), config.loss, &config.train, Some(gt.clone()))?;
            let last = outcome.records.last().ok_or(Error::Empty("trajectory"))?;
            let sorted = last.sorted_norms();
            let k = config.gt_rank;
            let gap_ratio = if sorted[k - 1] > 0.0 { sorted[k] / sorted[k - 1] } else { f64::INFINITY };
            let windows = incremental_windows(&outcome.records, k);
            if let Some(dir) = out {
                write_trajectory_csv(
                    &dir.join(format!("trajectory_{i}.csv")),
                    &outcome.records,
                    NormColumns::Top(config.top_norms.min(config.rank)),
                )?;
                outcome.factorization.save_json(&dir.join(format!("factorization_{i}.json")))?;
            }
            Ok(RecoveryRun {
                init_std: std,
                stop: outcome.stop,
                iters: outcome.iters,
                time: outcome.time,
                final_loss: last.loss,
                reconstruction_error: last.reconstruction_error.unwrap_or(f64::NAN),
                sorted_norms: sorted,
                gap_ratio,
                incremental: windows.len() == k && windows_are_ordered(&windows),
                wall_time: start.elapsed().as_secs_f64(),
            })
        })
        .collect::<Result<_>>()?;
    let report = RecoveryReport { runs, rip };
    if let Some(dir) = out {
        write_recovery_summary(dir, config.gt_rank, &report)?;
    }
    Ok(report)
}

fn stop_name(stop: &StopReason) -> &'static str {
    match stop {
        StopReason::Converged => "converged",
        StopReason::MaxIters => "max_iters",
        StopReason::Diverged { .. } => "diverged",
        StopReason::Halted => "halted",
    }
}

fn write_recovery_summary(dir: &Path, gt_rank: usize, report: &RecoveryReport) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
    w.write_record([
        "run",
        "init_std",
        "stop",
        "iters",
        "time",
        "final_loss",
        "reconstruction_error",
        "norm_at_gt_rank",
        "norm_after_gt_rank",
        "gap_ratio",
        "incremental",
    ])?;
    for (i, r) in report.runs.iter().enumerate() {
        w.write_record([
            i.to_string(),
            r.init_std.to_string(),
            stop_name(&r.stop).to_string(),
            r.iters.to_string(),
            r.time.to_string(),
            r.final_loss.to_string(),
            r.reconstruction_error.to_string(),
            r.sorted_norms[gt_rank - 1].to_string(),
            r.sorted_norms[gt_rank].to_string(),
            r.gap_ratio.to_string(),
            r.incremental.to_string(),
        ])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("timings.csv"))?;
    w.write_record(["run", "wall_time"])?;
    for (i, r) in report.runs.iter().enumerate() {
        w.write_record([i.to_string(), format!("{:.3}", r.wall_time)])?;
    }
    w.flush()?;
    Ok(())
}

/// Small-step runs on a completion instance with every dynamics check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsConfig {
    pub shape: Vec<usize>,
    pub gt_rank: usize,
    pub observations: usize,
    pub rank: usize,
    pub init_std: f64,
    pub loss: LossKind,
    pub conservation_lr: f64,
    pub conservation_steps: u64,
    pub conservation_tol: f64,
    /// Required drift reduction when the step size is halved.
    pub halving_factor: f64,
    pub ode_lr: f64,
    pub ode_steps: u64,
    pub ode_tol: f64,
    pub norm_floor: f64,
    /// Unbalancedness of the init used for the bounds check.
    pub unbalanced_eps: f64,
    pub bounds_slack: f64,
    pub seed: u64,
}

impl DynamicsConfig {
    pub fn validate(&self) -> Result<()> {
        let shape = Shape::new(self.shape.clone())?;
        if self.gt_rank == 0 || self.rank == 0 {
            return Err(Error::config("ranks must be positive"));
        }
        if self.observations == 0 || self.observations > shape.numel() {
            return Err(Error::config("observation count out of range"));
        }
        let positive = [
            self.init_std,
            self.conservation_lr,
            self.ode_lr,
            self.conservation_tol,
            self.ode_tol,
            self.bounds_slack,
            self.norm_floor,
        ];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::config("step sizes, tolerances, scales and floors must be positive"));
        }
        if !(self.unbalanced_eps >= 0.0) {
            return Err(Error::config("unbalancedness must be non-negative"));
        }
        if self.conservation_steps == 0 || self.ode_steps == 0 {
            return Err(Error::config("step counts must be positive"));
        }
        self.loss.validate()
    }

    pub fn problem(&self) -> Result<Problem> {
        let shape = Shape::new(self.shape.clone())?;
        let gt = generate_ground_truth(&GroundTruthSpec::new(shape, self.gt_rank, self.seed))?;
        Ok(Problem::Completion(sample_observations(&gt, self.observations, self.seed)?))
    }

    pub fn balanced_init(&self) -> Result<CpFactorization> {
        initialize(
            &InitSpec::balanced_gaussian(self.init_std, self.seed),
            &Shape::new(self.shape.clone())?,
            self.rank,
        )
    }
}

/// Grows the first-mode vector of every component so its squared norm
/// exceeds the others by exactly `eps`.
pub fn unbalance(f: &CpFactorization, eps: f64) -> Result<CpFactorization> {
    let mut out = f.clone();
    for r in 0..f.rank() {
        let v = f.vector(r, 0);
        let sq: f64 = v.iter().map(|x| x * x).sum();
        if sq == 0.0 {
            return Err(Error::ZeroVector { component: r, mode: 0 });
        }
        let s = ((sq + eps) / sq).sqrt();
        let scaled: Vec<f64> = v.iter().map(|x| x * s).collect();
        out.set_vector(r, 0, &scaled)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsReport {
    pub conservation: DynamicsCheckReport,
    pub conservation_half_lr: DynamicsCheckReport,
    pub halving_ratio: f64,
    pub halving_pass: bool,
    pub ode: DynamicsCheckReport,
    pub bounds: DynamicsCheckReport,
    pub bounds_eps: f64,
    /// Worst excursion outside the bounds relative to their scale.
    pub bounds_relative_excursion: f64,
    pub pass: bool,
}

fn fixed(lr: f64, steps: u64) -> TrainConfig {
    TrainConfig {
        stop_loss: 0.0,
        ..TrainConfig::fixed(lr, steps)
    }
}

pub fn run_dynamics(config: &DynamicsConfig, out: Option<&Path>) -> Result<DynamicsReport> {
    config.validate()?;
    let problem = Arc::new(config.problem()?);
    let order = config.shape.len();
    let balanced = config.balanced_init()?;
    let kind = config.loss;

    let run = |f: CpFactorization, lr: f64, steps: u64| train_with(f, problem.clone(), kind, &fixed(lr, steps), None);
    let jobs: Vec<(CpFactorization, f64, u64)> = vec![
        (balanced.clone(), config.conservation_lr, config.conservation_steps),
        (balanced.clone(), config.conservation_lr / 2.0, config.conservation_steps),
        (balanced.clone(), config.ode_lr, config.ode_steps),
        (unbalance(&balanced, config.unbalanced_eps)?, config.ode_lr, config.ode_steps),
    ];
    let outcomes = jobs
        .into_par_iter()
        .map(|(f, lr, steps)| run(f, lr, steps))
        .collect::<Result<Vec<_>>>()?;
    for o in &outcomes {
        if let StopReason::Diverged { detail } = &o.stop {
            return Err(Error::Divergence {
                iter: o.iters,
                detail: detail.clone(),
            });
        }
    }
    let conservation = check_balancedness_conservation(&outcomes[0].records, config.conservation_tol)?;
    let conservation_half_lr = check_balancedness_conservation(&outcomes[1].records, config.conservation_tol)?;
    let halving_ratio = conservation.max_violation / conservation_half_lr.max_violation;
    let halving_pass = halving_ratio >= config.halving_factor;
    let ode = check_norm_ode(&outcomes[2].records, order, config.norm_floor, config.ode_tol)?;
    let eps = outcomes[3].factorization.unbalancedness_magnitude().max(config.unbalanced_eps);
    let bounds = check_rate_bounds(&outcomes[3].records, order, eps, config.bounds_slack)?;
    let bounds_relative_excursion = relative_bound_excursion(&outcomes[3].records, order, eps)?;
    let pass = conservation.pass && halving_pass && ode.pass && bounds.pass;

    if let Some(dir) = out {
        write_trajectory_csv(&dir.join("trajectory_conservation.csv"), &outcomes[0].records, NormColumns::All)?;
        write_trajectory_csv(&dir.join("trajectory_ode.csv"), &outcomes[2].records, NormColumns::All)?;
        write_trajectory_csv(&dir.join("trajectory_unbalanced.csv"), &outcomes[3].records, NormColumns::All)?;
        conservation.write_series_csv(&dir.join("conservation.csv"))?;
        conservation_half_lr.write_series_csv(&dir.join("conservation_half_lr.csv"))?;
        ode.write_series_csv(&dir.join("ode_residuals.csv"))?;
        bounds.write_series_csv(&dir.join("bound_excursions.csv"))?;
    }
    Ok(DynamicsReport {
        conservation,
        conservation_half_lr,
        halving_ratio,
        halving_pass,
        ode,
        bounds,
        bounds_eps: eps,
        bounds_relative_excursion,
        pass,
    })
}

/// Frozen-weights check: a zero factorization never moves, so every
/// dynamics check passes with zero violation.
pub fn frozen_dynamics(config: &DynamicsConfig) -> Result<(DynamicsCheckReport, DynamicsCheckReport)> {
    let problem = config.problem()?;
    let zero = CpFactorization::zeros(problem.shape().clone(), config.rank)?;
    let out = train(zero, &problem, config.loss, &fixed(config.ode_lr, 10))?;
    Ok((
        check_balancedness_conservation(&out.records, 0.0)?,
        check_norm_ode(&out.records, config.shape.len(), config.norm_floor, 0.0)?,
    ))
}

/// Small-initialization sweep on a fully observed rank-one Huber instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankOneConfig {
    pub shape: Vec<usize>,
    pub delta_h: f64,
    /// Sphere radius; defaults to half the gap `min |y| − delta_h`.
    #[serde(default)]
    pub rho: Option<f64>,
    pub alphas: Vec<f64>,
    pub rank: usize,
    pub init_std: f64,
    /// Factor by which the leading component must dominate.
    pub margin: f64,
    pub horizon: f64,
    pub distance_cap: f64,
    pub track_lr: f64,
    pub trace_every: u64,
    #[serde(default)]
    pub escape: EscapeSchedule,
    /// Random single-component starts on the sphere; 0 disables the probe.
    pub companions: usize,
    pub companion_horizon: f64,
    pub companion_lr: f64,
    pub companion_tol: f64,
    pub nonleading_tol: f64,
    pub seed: u64,
}

impl RankOneConfig {
    pub fn validate(&self) -> Result<()> {
        Shape::new(self.shape.clone())?;
        if self.rank == 0 {
            return Err(Error::config("rank must be positive"));
        }
        if !(self.init_std > 0.0) {
            return Err(Error::config("init scale must be positive"));
        }
        if self.companions > 0 && !(self.companion_horizon > 0.0 && self.companion_lr > 0.0) {
            return Err(Error::config("companion horizon and step size must be positive"));
        }
        if self.trace_every == 0 {
            return Err(Error::config("trace_every must be positive"));
        }
        Ok(())
    }

    pub fn target(&self) -> Result<CpFactorization> {
        separated_rank_one_target(&Shape::new(self.shape.clone())?, self.seed)
    }

    pub fn rho_for(&self, problem: &Problem) -> f64 {
        self.rho
            .unwrap_or_else(|| 0.5 * (problem.min_abs_target() - self.delta_h))
    }

    pub fn experiment(&self, problem: &Problem) -> Result<RankOneExperimentConfig> {
        let base = leading_base_init(problem, self.delta_h, self.rank, self.init_std, self.margin, self.seed)?;
        let cfg = RankOneExperimentConfig {
            rho: self.rho_for(problem),
            alphas: self.alphas.clone(),
            base_init: base,
            horizon: self.horizon,
            distance_cap: self.distance_cap,
            delta_h: self.delta_h,
            track_lr: self.track_lr,
            trace_every: self.trace_every,
            escape: self.escape,
        };
        cfg.validate(problem)?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankOneSummary {
    pub rho: f64,
    pub assumptions: AssumptionReport,
    pub alphas: Vec<f64>,
    pub crossing_times: Vec<f64>,
    pub max_distances: Vec<f64>,
    pub nonleading_sums: Vec<f64>,
    pub crossing_nondecreasing: bool,
    pub distance_decreasing: bool,
    pub nonleading_pass: bool,
    pub sphere_starts: Option<SphereStartReport>,
    pub pass: bool,
    #[serde(skip)]
    pub traces: Vec<RankOneTrace>,
}

pub fn run_rank_one_experiment(config: &RankOneConfig, out: Option<&Path>) -> Result<RankOneSummary> {
    config.validate()?;
    let target = config.target()?;
    let problem = full_problem(&target);
    let exp = config.experiment(&problem)?;
    let assumptions = validate_assumptions(&exp.base_init, &problem, config.delta_h)?;
    if !assumptions.all_hold() {
        return Err(Error::config(format!(
            "assumptions fail: {}",
            assumptions.failures.join("; ")
        )));
    }
    let traces = alpha_sweep(&exp, &problem)?;
    let crossing_times: Vec<f64> = traces.iter().map(|t| t.crossing.time).collect();
    let max_distances: Vec<f64> = traces.iter().map(|t| t.max_distance).collect();
    let nonleading_sums: Vec<f64> = traces.iter().map(|t| t.nonleading_norm_sum).collect();
    let crossing_nondecreasing = crossing_times.windows(2).all(|w| w[1] >= w[0]);
    let distance_decreasing = max_distances.windows(2).all(|w| w[1] < w[0]);
    let nonleading_pass = nonleading_sums.last().is_some_and(|&s| s <= config.nonleading_tol);
    let sphere_starts = if config.companions > 0 {
        let probe_cfg = RankOneExperimentConfig {
            horizon: config.companion_horizon,
            track_lr: config.companion_lr,
            ..exp.clone()
        };
        let alpha = *config.alphas.last().ok_or(Error::Empty("alphas"))?;
        Some(sphere_start_probe(
            &probe_cfg,
            &problem,
            &target.end_tensor(),
            alpha,
            config.companions,
            config.seed,
            config.companion_tol,
        )?)
    } else {
        None
    };
    let pass = crossing_nondecreasing
        && distance_decreasing
        && nonleading_pass
        && sphere_starts.as_ref().map_or(true, |c| c.pass);
    let summary = RankOneSummary {
        rho: exp.rho,
        assumptions,
        alphas: config.alphas.clone(),
        crossing_times,
        max_distances,
        nonleading_sums,
        crossing_nondecreasing,
        distance_decreasing,
        nonleading_pass,
        sphere_starts,
        pass,
        traces,
    };
    if let Some(dir) = out {
        let mut w = csv::Writer::from_path(dir.join("sweep.csv"))?;
        w.write_record([
            "alpha",
            "crossed",
            "crossing_iter",
            "crossing_time",
            "crossing_norm",
            "leading",
            "nonleading_norm_sum",
            "max_distance",
        ])?;
        for t in &summary.traces {
            w.write_record([
                t.alpha.to_string(),
                t.crossing.crossed.to_string(),
                t.crossing.iter.to_string(),
                t.crossing.time.to_string(),
                t.crossing.norm.to_string(),
                t.leading.to_string(),
                t.nonleading_norm_sum.to_string(),
                t.max_distance.to_string(),
            ])?;
        }
        w.flush()?;
        for (i, t) in summary.traces.iter().enumerate() {
            t.write_csv(&dir.join(format!("trace_{i}.csv")))?;
        }
    }
    Ok(summary)
}

/// Recovery presets. `*-desk` configs use `R = 100`; `*-paper` use the
/// published scale.
pub fn recovery_preset(name: &str) -> Option<RecoveryConfig> {
    let order4 = |rank: usize, loss: LossKind, problem: ProblemSpec, stds: Vec<f64>, max_iters: u64| RecoveryConfig {
        shape: vec![10, 10, 10, 10],
        gt_rank: 5,
        problem,
        rank,
        init_stds: stds,
        loss,
        train: TrainConfig {
            lr: LrScheme::adaptive(),
            stop_loss: 1e-8,
            max_iters,
            record_every: 100,
            record_vector_norms: false,
        },
        top_norms: 10,
        rip_trials: 0,
        seed: 0,
    };
    let sq = LossKind::Squared { coeff: 1.0 };
    let huber = LossKind::ScaledHuber { delta: 5e-7 };
    let comp = ProblemSpec::Completion { observations: 2000 };
    let sense = ProblemSpec::Sensing { measurements: 2000 };
    let paper_stds = vec![0.05, 0.01, 0.005];
    let cfg = match name {
        "fig3-desk" => order4(100, sq, comp, vec![0.005], 1_000_000),
        "fig3-paper" => order4(1000, sq, comp, paper_stds, 1_000_000),
        "fig5-desk" => order4(100, huber, comp, vec![0.005], 150_000),
        "fig5-paper" => order4(1000, huber, comp, paper_stds, 1_000_000),
        "fig6-desk" | "fig6-paper" => RecoveryConfig {
            shape: vec![10, 10, 10],
            gt_rank: 3,
            problem: ProblemSpec::Completion { observations: 300 },
            init_stds: if name == "fig6-desk" { vec![0.001] } else { paper_stds },
            ..order4(100, sq, comp, vec![], 1_000_000)
        },
        "fig7-desk" => RecoveryConfig {
            rip_trials: 200,
            ..order4(100, sq, sense, vec![0.005], 1_000_000)
        },
        "fig7-paper" => RecoveryConfig {
            rip_trials: 200,
            ..order4(1000, sq, sense, paper_stds, 1_000_000)
        },
        _ => return None,
    };
    Some(cfg)
}

pub const RECOVERY_PRESETS: [&str; 8] = [
    "fig3-desk",
    "fig3-paper",
    "fig5-desk",
    "fig5-paper",
    "fig6-desk",
    "fig6-paper",
    "fig7-desk",
    "fig7-paper",
];

pub fn dynamics_preset(name: &str) -> Option<DynamicsConfig> {
    (name == "desk").then(|| DynamicsConfig {
        shape: vec![8, 8, 8],
        gt_rank: 2,
        observations: 200,
        rank: 10,
        init_std: 0.01,
        loss: LossKind::half_squared(),
        conservation_lr: 1e-3,
        conservation_steps: 10_000,
        conservation_tol: 1e-3,
        halving_factor: 1.5,
        ode_lr: 1e-5,
        ode_steps: 1000,
        ode_tol: 1e-2,
        norm_floor: 1e-6,
        unbalanced_eps: 0.5,
        bounds_slack: 1e-2,
        seed: 0,
    })
}

pub fn rank_one_preset(name: &str) -> Option<RankOneConfig> {
    (name == "desk").then(|| RankOneConfig {
        shape: vec![4, 4, 4],
        delta_h: 0.5,
        rho: None,
        alphas: vec![1e-1, 1e-2, 1e-3],
        rank: 3,
        init_std: 0.5,
        margin: 1.5,
        horizon: 50.0,
        distance_cap: 1e3,
        track_lr: 1e-2,
        trace_every: 100,
        escape: EscapeSchedule::default(),
        companions: 8,
        companion_horizon: 3000.0,
        companion_lr: 0.05,
        companion_tol: 1e-6,
        nonleading_tol: 1e-4,
        seed: 0,
    })
}
