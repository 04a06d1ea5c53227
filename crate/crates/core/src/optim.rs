//! Gradient descent on the CP objective, the EMA-normalized step-size
//! scheme, Adam, and trajectory recording.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cp::{CpFactorization, CpGradient};
use crate::error::{Error, Result};
use crate::loss::{evaluate_into, LossKind, Problem};
use crate::rng::{self, Stream};
use crate::tensor::{dot, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrScheme {
    Fixed {
        lr: f64,
    },
    /// `η_t = η / (√(γ_t / (1 − β^t)) + eps)` with
    /// `γ_t = β γ_{t−1} + (1 − β) ‖∇φ‖²`.
    Adaptive {
        #[serde(default = "default_base_lr")]
        base_lr: f64,
        #[serde(default = "default_beta")]
        beta: f64,
        #[serde(default = "default_adaptive_eps")]
        eps: f64,
    },
}

fn default_base_lr() -> f64 {
    1e-2
}
fn default_beta() -> f64 {
    0.99
}
fn default_adaptive_eps() -> f64 {
    1e-6
}

impl LrScheme {
    pub fn adaptive() -> Self {
        LrScheme::Adaptive {
            base_lr: default_base_lr(),
            beta: default_beta(),
            eps: default_adaptive_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LrScheme::Fixed { lr } if lr > 0.0 && lr.is_finite() => Ok(()),
            LrScheme::Fixed { lr } => Err(Error::config(format!("learning rate must be positive, got {lr}"))),
            LrScheme::Adaptive { base_lr, beta, eps } => {
                if !(base_lr > 0.0 && base_lr.is_finite()) {
                    return Err(Error::config(format!("base learning rate must be positive, got {base_lr}")));
                }
                if !(beta > 0.0 && beta < 1.0) {
                    return Err(Error::config(format!("EMA coefficient must lie in (0, 1), got {beta}")));
                }
                if !(eps > 0.0) {
                    return Err(Error::config(format!("eps must be positive, got {eps}")));
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveLrState {
    pub gamma: f64,
}

/// One step of the adaptive scheme at iteration `t ≥ 1`.
pub fn adaptive_lr_step_size(
    state: AdaptiveLrState,
    grad_sq_norm: f64,
    t: u64,
    base_lr: f64,
    beta: f64,
    eps: f64,
) -> (f64, AdaptiveLrState) {
    debug_assert!(t >= 1);
    let gamma = beta * state.gamma + (1.0 - beta) * grad_sq_norm;
    let corrected = gamma / (1.0 - beta.powf(t as f64));
    (base_lr / (corrected.sqrt() + eps), AdaptiveLrState { gamma })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: LrScheme,
    #[serde(default = "default_stop_loss")]
    pub stop_loss: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: u64,
    #[serde(default = "default_record_every")]
    pub record_every: u64,
    /// Store per-vector squared norms in each record.
    #[serde(default)]
    pub record_vector_norms: bool,
}

fn default_stop_loss() -> f64 {
    1e-8
}
fn default_max_iters() -> u64 {
    1_000_000
}
fn default_record_every() -> u64 {
    100
}

impl TrainConfig {
    pub fn fixed(lr: f64, max_iters: u64) -> Self {
        Self {
            lr: LrScheme::Fixed { lr },
            stop_loss: default_stop_loss(),
            max_iters,
            record_every: 1,
            record_vector_norms: true,
        }
    }

    pub fn adaptive(max_iters: u64, record_every: u64) -> Self {
        Self {
            lr: LrScheme::adaptive(),
            stop_loss: default_stop_loss(),
            max_iters,
            record_every,
            record_vector_norms: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.lr.validate()?;
        if self.max_iters < 1 {
            return Err(Error::config("max_iters must be at least 1"));
        }
        if self.record_every < 1 {
            return Err(Error::config("record_every must be at least 1"));
        }
        if !(self.stop_loss >= 0.0) {
            return Err(Error::config("stop_loss must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub iter: u64,
    /// Cumulative step size `Σ η_t`.
    pub time: f64,
    /// Step size about to be applied at this iterate (0 at the final record).
    pub lr: f64,
    pub loss: f64,
    pub component_norms: Vec<f64>,
    pub unbalancedness: f64,
    pub gammas: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vector_sq_norms: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reconstruction_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub companion_distance: Option<f64>,
}

impl TrajectoryRecord {
    pub fn end_norm_estimate(&self) -> f64 {
        self.component_norms.iter().sum()
    }

    /// Component norms, largest first.
    pub fn sorted_norms(&self) -> Vec<f64> {
        let mut v = self.component_norms.clone();
        v.sort_by(|a, b| b.total_cmp(a));
        v
    }
}

/// `γ_r = ⟨−∇L(W_e), ⊗ŵ_r⟩` from the objective gradient, using
/// `⟨∂φ/∂w_r^n, w_r^n⟩ = ⟨∇L, ⊗_n w_r^n⟩` for any mode `n`.
pub(crate) fn gammas_from_gradient(f: &CpFactorization, grad: &CpGradient) -> Vec<f64> {
    (0..f.rank())
        .map(|r| {
            let sigma = f.component_norm(r);
            if sigma == 0.0 {
                return 0.0;
            }
            -dot(&grad.block(r, 0), &f.vector(r, 0)) / sigma
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    MaxIters,
    Diverged { detail: String },
    /// Stopped by a caller-supplied predicate.
    Halted,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub factorization: CpFactorization,
    pub records: Vec<TrajectoryRecord>,
    pub stop: StopReason,
    pub iters: u64,
    pub time: f64,
}

/// Stepwise gradient descent. `train` drives it to completion; the rank-one
/// experiments step two trainers in lockstep.
#[derive(Debug, Clone)]
pub struct Trainer {
    f: CpFactorization,
    problem: std::sync::Arc<Problem>,
    kind: LossKind,
    config: TrainConfig,
    ground_truth: Option<std::sync::Arc<Tensor>>,
    lr_state: AdaptiveLrState,
    grad: CpGradient,
    iter: u64,
    time: f64,
    loss: f64,
    fresh: bool,
}

impl Trainer {
    pub fn new(f: CpFactorization, problem: std::sync::Arc<Problem>, kind: LossKind, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        kind.validate()?;
        f.shape().expect_same(problem.shape())?;
        let grad = CpGradient::zeros_like(&f);
        Ok(Self {
            f,
            problem,
            kind,
            config,
            ground_truth: None,
            lr_state: AdaptiveLrState::default(),
            grad,
            iter: 0,
            time: 0.0,
            loss: f64::NAN,
            fresh: false,
        })
    }

    pub fn with_ground_truth(mut self, truth: std::sync::Arc<Tensor>) -> Result<Self> {
        self.f.shape().expect_same(truth.shape())?;
        self.ground_truth = Some(truth);
        Ok(self)
    }

    pub fn factorization(&self) -> &CpFactorization {
        &self.f
    }

    pub fn into_factorization(self) -> CpFactorization {
        self.f
    }

    pub fn iter(&self) -> u64 {
        self.iter
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Loss and gradient at the current weights, cached until the next step.
    pub fn evaluate(&mut self) -> Result<f64> {
        if !self.fresh {
            self.loss = evaluate_into(&self.f, &self.problem, self.kind, &mut self.grad)?;
            self.fresh = true;
        }
        Ok(self.loss)
    }

    pub fn gradient(&mut self) -> Result<&CpGradient> {
        self.evaluate()?;
        Ok(&self.grad)
    }

    fn next_lr(&self, grad_sq: f64) -> (f64, AdaptiveLrState) {
        match self.config.lr {
            LrScheme::Fixed { lr } => (lr, self.lr_state),
            LrScheme::Adaptive { base_lr, beta, eps } => {
                adaptive_lr_step_size(self.lr_state, grad_sq, self.iter + 1, base_lr, beta, eps)
            }
        }
    }

    /// Step size the next `step` would use.
    pub fn peek_lr(&mut self) -> Result<f64> {
        self.evaluate()?;
        Ok(self.next_lr(self.grad.sq_norm()).0)
    }

    /// Checks the current loss and gradient are finite.
    pub fn check_finite(&mut self) -> Result<()> {
        let loss = self.evaluate()?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                iter: self.iter,
                detail: format!("loss is {loss}"),
            });
        }
        if !self.grad.is_finite() {
            return Err(Error::Divergence {
                iter: self.iter,
                detail: "gradient has non-finite entries".into(),
            });
        }
        Ok(())
    }

    /// One update with the configured scheme; returns the step size used.
    pub fn step(&mut self) -> Result<f64> {
        self.check_finite()?;
        let (lr, state) = self.next_lr(self.grad.sq_norm());
        self.step_with_lr_state(lr, state);
        Ok(lr)
    }

    /// One update with an explicit step size, bypassing the scheme.
    pub fn step_with_lr(&mut self, lr: f64) -> Result<()> {
        self.check_finite()?;
        self.step_with_lr_state(lr, self.lr_state);
        Ok(())
    }

    fn step_with_lr_state(&mut self, lr: f64, state: AdaptiveLrState) {
        self.f.descend(&self.grad, lr);
        self.lr_state = state;
        self.iter += 1;
        self.time += lr;
        self.fresh = false;
    }

    pub fn record(&mut self) -> Result<TrajectoryRecord> {
        let loss = self.evaluate()?;
        let lr = self.next_lr(self.grad.sq_norm()).0;
        let reconstruction_error = match &self.ground_truth {
            Some(t) => Some(self.f.end_tensor().sub(t)?.norm()),
            None => None,
        };
        Ok(TrajectoryRecord {
            iter: self.iter,
            time: self.time,
            lr,
            loss,
            component_norms: self.f.component_norms(),
            unbalancedness: self.f.unbalancedness_magnitude(),
            gammas: gammas_from_gradient(&self.f, &self.grad),
            vector_sq_norms: self
                .config
                .record_vector_norms
                .then(|| (0..self.f.rank()).map(|r| self.f.vector_sq_norms(r)).collect()),
            reconstruction_error,
            companion_distance: None,
        })
    }

    /// Runs until the loss drops below `stop_loss`, `max_iters` updates have
    /// been applied, or `halt` returns true for the current iterate.
    pub fn run_until(&mut self, mut halt: impl FnMut(&mut Trainer) -> Result<bool>) -> Result<(Vec<TrajectoryRecord>, StopReason)> {
        let mut records = Vec::new();
        loop {
            let loss = self.evaluate()?;
            if let Err(Error::Divergence { detail, .. }) = self.check_finite() {
                let mut diag = self.record()?;
                diag.lr = 0.0;
                records.push(diag);
                return Ok((records, StopReason::Diverged { detail }));
            }
            let converged = loss < self.config.stop_loss;
            let exhausted = self.iter >= self.config.max_iters;
            let halted = !converged && !exhausted && halt(self)?;
            let last = converged || exhausted || halted;
            if last || self.iter % self.config.record_every == 0 {
                let mut rec = self.record()?;
                if last {
                    rec.lr = 0.0;
                }
                records.push(rec);
            }
            if converged {
                return Ok((records, StopReason::Converged));
            }
            if exhausted {
                return Ok((records, StopReason::MaxIters));
            }
            if halted {
                return Ok((records, StopReason::Halted));
            }
            self.step()?;
        }
    }
}

pub fn train(f: CpFactorization, problem: &Problem, kind: LossKind, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(f, std::sync::Arc::new(problem.clone()), kind, config, None)
}

pub fn train_with(
    f: CpFactorization,
    problem: std::sync::Arc<Problem>,
    kind: LossKind,
    config: &TrainConfig,
    ground_truth: Option<std::sync::Arc<Tensor>>,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(f, problem, kind, config.clone())?;
    if let Some(t) = ground_truth {
        trainer = trainer.with_ground_truth(t)?;
    }
    let (records, stop) = trainer.run_until(|_| Ok(false))?;
    Ok(TrainOutcome {
        iters: trainer.iter(),
        time: trainer.time(),
        factorization: trainer.into_factorization(),
        records,
        stop,
    })
}

/// Which component-norm columns a trajectory CSV carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormColumns {
    /// The `k` largest norms, sorted (`norm_top1..norm_topk`).
    Top(usize),
    /// Every component in index order (`norm_r0.., gamma_r0..`).
    All,
}

/// Writes records as CSV. Columns: `iter,time,lr,loss,unbalancedness,
/// reconstruction_error,companion_distance` followed by the norm columns.
/// Missing optional values are written as empty fields.
pub fn write_trajectory_csv(path: &Path, records: &[TrajectoryRecord], columns: NormColumns) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    let rank = records.first().map_or(0, |r| r.component_norms.len());
    let mut header: Vec<String> = [
        "iter",
        "time",
        "lr",
        "loss",
        "unbalancedness",
        "reconstruction_error",
        "companion_distance",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    match columns {
        NormColumns::Top(k) => header.extend((1..=k).map(|j| format!("norm_top{j}"))),
        NormColumns::All => {
            header.extend((0..rank).map(|r| format!("norm_r{r}")));
            header.extend((0..rank).map(|r| format!("gamma_r{r}")));
        }
    }
    w.write_record(&header)?;
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
    for rec in records {
        let mut row = vec![
            rec.iter.to_string(),
            rec.time.to_string(),
            rec.lr.to_string(),
            rec.loss.to_string(),
            rec.unbalancedness.to_string(),
            opt(rec.reconstruction_error),
            opt(rec.companion_distance),
        ];
        match columns {
            NormColumns::Top(k) => {
                let sorted = rec.sorted_norms();
                row.extend((0..k).map(|j| sorted.get(j).map_or_else(String::new, |x| x.to_string())));
            }
            NormColumns::All => {
                row.extend(rec.component_norms.iter().map(|x| x.to_string()));
                row.extend(rec.gammas.iter().map(|x| x.to_string()));
            }
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    #[serde(default = "default_adam_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub eps: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_stop_loss")]
    pub stop_loss: f64,
    #[serde(default = "default_adam_iters")]
    pub max_iters: u64,
    #[serde(default = "default_adam_record_every")]
    pub record_every: u64,
    pub seed: u64,
}

fn default_adam_lr() -> f64 {
    5e-4
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_batch_size() -> usize {
    5000
}
fn default_adam_iters() -> u64 {
    10_000
}
fn default_adam_record_every() -> u64 {
    100
}

impl AdamConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            lr: default_adam_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
            batch_size: default_batch_size(),
            stop_loss: default_stop_loss(),
            max_iters: default_adam_iters(),
            record_every: default_adam_record_every(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::config("Adam learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("Adam eps must be positive"));
        }
        if self.batch_size == 0 || self.max_iters == 0 || self.record_every == 0 {
            return Err(Error::config("batch_size, max_iters and record_every must be positive"));
        }
        Ok(())
    }
}

/// Adam moment state over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, num_params: usize) -> Self {
        Self {
            config,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps, .. } = self.config;
        let bc1 = 1.0 - beta1.powf(self.t as f64);
        let bc2 = 1.0 - beta2.powf(self.t as f64);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamRecord {
    pub iter: u64,
    pub batch_loss: f64,
}

#[derive(Debug, Clone)]
pub struct AdamOutcome {
    pub records: Vec<AdamRecord>,
    pub iters: u64,
    pub final_batch_loss: f64,
    pub converged: bool,
}

/// Mini-batch Adam. `objective(params, batch, grad)` returns the batch loss
/// and writes its gradient. Batches are consecutive chunks of a fresh seeded
/// permutation each epoch.
pub fn adam_train(
    params: &mut [f64],
    num_samples: usize,
    config: &AdamConfig,
    mut objective: impl FnMut(&[f64], &[usize], &mut [f64]) -> Result<f64>,
) -> Result<AdamOutcome> {
    config.validate()?;
    if num_samples == 0 {
        return Err(Error::Empty("training set"));
    }
    let mut adam = Adam::new(config.clone(), params.len());
    let mut rng = rng::stream(config.seed, Stream::Shuffle);
    let mut order: Vec<usize> = (0..num_samples).collect();
    let mut cursor = num_samples;
    let mut grad = vec![0.0; params.len()];
    let mut records = Vec::new();
    let mut iter = 0u64;
    loop {
        if cursor >= num_samples {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + config.batch_size).min(num_samples);
        let batch = &order[cursor..end];
        cursor = end;
        grad.fill(0.0);
        let loss = objective(params, batch, &mut grad)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                iter,
                detail: format!("non-finite batch loss {loss} or gradient"),
            });
        }
        let converged = loss < config.stop_loss;
        if converged || iter % config.record_every == 0 || iter + 1 >= config.max_iters {
            records.push(AdamRecord { iter, batch_loss: loss });
        }
        if converged {
            return Ok(AdamOutcome {
                records,
                iters: iter,
                final_batch_loss: loss,
                converged: true,
            });
        }
        adam.step(params, &grad);
        iter += 1;
        if iter >= config.max_iters {
            return Ok(AdamOutcome {
                records,
                iters: iter,
                final_batch_loss: loss,
                converged: false,
            });
        }
    }
}

pub fn write_json_manifest<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut file, value)?;
    file.write_all(b"\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cp::{initialize, InitSpec};
    use crate::loss::{objective_gradient, ObservationSet};
    use crate::problems::{generate_ground_truth, sample_observations, GroundTruthSpec};
    use crate::tensor::Shape;

    fn desk_problem(dims: &[usize], rank: usize, count: usize, seed: u64) -> (Problem, Tensor) {
        let s = Shape::new(dims.to_vec()).unwrap();
        let gt = generate_ground_truth(&GroundTruthSpec::new(s, rank, seed)).unwrap();
        (Problem::Completion(sample_observations(&gt, count, seed).unwrap()), gt)
    }

    #[test]
    fn adaptive_first_step_matches_formula() {
        let (beta, eta) = (0.99, 1e-2);
        let g = 4.0;
        let (lr, st) = adaptive_lr_step_size(AdaptiveLrState::default(), g, 1, eta, beta, 1e-6);
        assert!((st.gamma - (1.0 - beta) * g).abs() < 1e-18);
        assert!((lr - eta / (g.sqrt() + 1e-6)).abs() < 1e-15);
        let (lr0, _) = adaptive_lr_step_size(AdaptiveLrState::default(), 0.0, 1, eta, beta, 1e-6);
        assert!((lr0 - eta / 1e-6).abs() < 1e-6);
    }

    #[test]
    fn adaptive_constant_gradient_converges() {
        let g = 2.5;
        let mut state = AdaptiveLrState::default();
        let mut lr = 0.0;
        for t in 1..=3000 {
            (lr, state) = adaptive_lr_step_size(state, g, t, 1e-2, 0.99, 1e-6);
        }
        let limit = 1e-2 / (g.sqrt() + 1e-6);
        assert!((lr - limit).abs() < 1e-12 * limit);
    }

    #[test]
    fn zero_factorization_never_moves() {
        let (problem, _) = desk_problem(&[3, 3, 3], 1, 10, 1);
        let f = CpFactorization::zeros(problem.shape().clone(), 2).unwrap();
        let out = train(f.clone(), &problem, LossKind::half_squared(), &TrainConfig::fixed(0.1, 50)).unwrap();
        assert_eq!(out.factorization, f);
        assert_eq!(out.stop, StopReason::MaxIters);
        assert_eq!(out.iters, 50);

        let exact = initialize(&InitSpec::gaussian(1.0, 3), problem.shape(), 1).unwrap();
        let interp = Problem::Completion(ObservationSet::full(&exact.end_tensor()));
        let out = train(exact.clone(), &interp, LossKind::half_squared(), &TrainConfig::fixed(0.1, 50)).unwrap();
        assert_eq!(out.stop, StopReason::Converged);
        assert_eq!(out.iters, 0);
        assert_eq!(out.records.len(), 1);
    }

    #[test]
    fn single_step_is_plain_gradient_descent() {
        let (problem, _) = desk_problem(&[3, 4, 2], 2, 12, 4);
        let f = initialize(&InitSpec::gaussian(0.5, 2), problem.shape(), 3).unwrap();
        let kind = LossKind::half_squared();
        let g = objective_gradient(&f, &problem, kind).unwrap();
        let out = train(f.clone(), &problem, kind, &TrainConfig::fixed(0.05, 1)).unwrap();
        let mut expected = f.weights();
        for (r, comp) in expected.iter_mut().enumerate() {
            for (n, v) in comp.iter_mut().enumerate() {
                for (x, gx) in v.iter_mut().zip(g.block(r, n)) {
                    *x -= 0.05 * gx;
                }
            }
        }
        assert_eq!(out.factorization.weights(), expected);
        assert_eq!(out.records.len(), 2);
        assert_eq!(out.records[1].time, 0.05);
    }

    #[test]
    fn descent_with_small_fixed_lr() {
        let (problem, _) = desk_problem(&[4, 4, 4], 2, 40, 9);
        let f = initialize(&InitSpec::gaussian(0.5, 5), problem.shape(), 4).unwrap();
        let out = train(f, &problem, LossKind::half_squared(), &TrainConfig::fixed(1e-4, 100)).unwrap();
        for w in out.records.windows(2) {
            assert!(w[1].loss <= w[0].loss + 1e-12);
        }
    }

    #[test]
    fn adaptive_step_keeps_gradient_direction() {
        let (problem, _) = desk_problem(&[4, 3, 3], 2, 20, 2);
        let f = initialize(&InitSpec::gaussian(0.3, 5), problem.shape(), 3).unwrap();
        let mut t = Trainer::new(f, std::sync::Arc::new(problem), LossKind::half_squared(), TrainConfig::adaptive(10, 1)).unwrap();
        for _ in 0..10 {
            let before = t.factorization().clone();
            let g = t.gradient().unwrap().clone();
            let lr = t.step().unwrap();
            let after = t.factorization();
            for n in 0..before.order() {
                for ((a, b), gx) in after.factor(n).iter().zip(before.factor(n)).zip(g.factor(n)) {
                    assert!(((a - b) + lr * gx).abs() <= 1e-15 * (1.0 + b.abs()));
                }
            }
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (problem, gt) = desk_problem(&[4, 4, 4], 2, 30, 3);
        let run = || {
            let f = initialize(&InitSpec::gaussian(0.1, 8), problem.shape(), 5).unwrap();
            train_with(
                f,
                std::sync::Arc::new(problem.clone()),
                LossKind::half_squared(),
                &TrainConfig::adaptive(300, 7),
                Some(std::sync::Arc::new(gt.clone())),
            )
            .unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.records, b.records);
        assert_eq!(a.factorization, b.factorization);
        // first and last are always recorded
        assert_eq!(a.records.first().unwrap().iter, 0);
        assert_eq!(a.records.last().unwrap().iter, a.iters);
    }

    #[test]
    fn recorded_gammas_match_direct_inner_product() {
        let (problem, _) = desk_problem(&[3, 4, 3], 2, 25, 6);
        let f = initialize(&InitSpec::gaussian(0.4, 1), problem.shape(), 3).unwrap();
        let kind = LossKind::half_squared();
        let mut t = Trainer::new(f.clone(), std::sync::Arc::new(problem.clone()), kind, TrainConfig::fixed(0.1, 1)).unwrap();
        let rec = t.record().unwrap();
        let g = crate::loss::loss_gradient_tensor(&f, &problem, kind).unwrap().to_dense();
        for r in 0..3 {
            let unit = crate::tensor::outer_product(&f.component_directions(r)).unwrap();
            let direct = -crate::tensor::inner(&g, &unit).unwrap();
            assert!((rec.gammas[r] - direct).abs() <= 1e-12 * (1.0 + direct.abs()));
        }
    }

    #[test]
    fn divergence_is_reported() {
        let (problem, _) = desk_problem(&[3, 3, 3], 2, 20, 1);
        let f = initialize(&InitSpec::gaussian(3.0, 1), problem.shape(), 3).unwrap();
        let out = train(f, &problem, LossKind::half_squared(), &TrainConfig::fixed(1e3, 1000)).unwrap();
        assert!(matches!(out.stop, StopReason::Diverged { .. }), "{:?}", out.stop);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let cfg = AdamConfig {
            batch_size: 1,
            max_iters: 1,
            ..AdamConfig::with_seed(0)
        };
        let mut adam = Adam::new(cfg.clone(), 1);
        let mut p = [1.0];
        adam.step(&mut p, &[3.7]);
        // m̂ = g, v̂ = g², so the step is lr · g / (|g| + eps).
        let expected = 1.0 - cfg.lr * 3.7 / (3.7 + cfg.eps);
        assert!((p[0] - expected).abs() < 1e-15);
        assert!(((1.0 - p[0]) - cfg.lr).abs() < 1e-11);

        let mut q = [2.0];
        Adam::new(cfg, 1).step(&mut q, &[0.0]);
        assert_eq!(q[0], 2.0);
    }

    #[test]
    fn adam_fits_toy_regression() {
        // y = 0.3 + 1.2 x over 10 points, full batch.
        let xs: Vec<f64> = (0..10).map(|i| i as f64 / 10.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 0.3 + 1.2 * x).collect();
        let cfg = AdamConfig {
            lr: 1e-2,
            batch_size: 10,
            max_iters: 5000,
            ..AdamConfig::with_seed(4)
        };
        let mut params = [0.0, 0.0];
        let out = adam_train(&mut params, 10, &cfg, |p, batch, g| {
            let mut loss = 0.0;
            for &i in batch {
                let r = p[0] + p[1] * xs[i] - ys[i];
                loss += r * r;
                g[0] += 2.0 * r;
                g[1] += 2.0 * r * xs[i];
            }
            let n = batch.len() as f64;
            g.iter_mut().for_each(|x| *x /= n);
            Ok(loss / n)
        })
        .unwrap();
        assert!(out.final_batch_loss < 1e-6, "{}", out.final_batch_loss);
    }
}
