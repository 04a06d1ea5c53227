//! Checks of the component-norm dynamics over recorded trajectories:
//! conservation of per-component unbalancedness, the balanced norm ODE
//! `dσ/dt = N γ σ^{2−2/N}`, and its two-sided bounds for unbalanced
//! initializations.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cp::CpFactorization;
use crate::error::{Error, Result};
use crate::loss::{loss_gradient_tensor, LossKind, Problem};
use crate::optim::TrajectoryRecord;

/// `γ_r = ⟨−∇L(W_e), ⊗ŵ_r⟩`, zero when any vector of component `r` is zero.
/// The completion gradient is contracted sparsely.
pub fn gamma(f: &CpFactorization, problem: &Problem, kind: LossKind, r: usize) -> Result<f64> {
    if r >= f.rank() {
        return Err(Error::IndexOutOfRange {
            index: vec![r],
            dims: vec![f.rank()],
        });
    }
    let dirs = f.component_directions(r);
    if dirs.iter().all(|v| v.iter().all(|&x| x == 0.0)) || f.component_norm(r) == 0.0 {
        return Ok(0.0);
    }
    let g = loss_gradient_tensor(f, problem, kind)?;
    Ok(-g.inner_rank_one(&dirs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualPoint {
    pub iter: u64,
    pub component: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsCheckReport {
    pub name: String,
    pub max_violation: f64,
    pub tolerance: f64,
    pub pass: bool,
    /// Number of (step, component) pairs that entered the check.
    pub checked: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub series: Vec<ResidualPoint>,
}

impl DynamicsCheckReport {
    fn new(name: &str, max_violation: f64, tolerance: f64, checked: usize, series: Vec<ResidualPoint>) -> Self {
        Self {
            name: name.to_string(),
            max_violation,
            tolerance,
            pass: max_violation <= tolerance,
            checked,
            series,
        }
    }

    pub fn write_series_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["iter", "component", "value"])?;
        for p in &self.series {
            w.write_record([p.iter.to_string(), p.component.to_string(), p.value.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Largest change, over time, components and mode pairs, of
/// `‖w_r^n‖² − ‖w_r^m‖²` relative to the first record.
pub fn check_balancedness_conservation(records: &[TrajectoryRecord], tolerance: f64) -> Result<DynamicsCheckReport> {
    let first = records.first().ok_or(Error::Empty("trajectory"))?;
    let base = first
        .vector_sq_norms
        .as_ref()
        .ok_or_else(|| Error::config("records lack per-vector norms; enable record_vector_norms"))?;
    let mut worst = 0.0f64;
    let mut series = Vec::new();
    for rec in records {
        let norms = rec
            .vector_sq_norms
            .as_ref()
            .ok_or_else(|| Error::config("records lack per-vector norms; enable record_vector_norms"))?;
        let mut step_worst = 0.0f64;
        for (r, (now, then)) in norms.iter().zip(base).enumerate() {
            let mut comp_worst = 0.0f64;
            for n in 0..now.len() {
                for m in n + 1..now.len() {
                    let drift = ((now[n] - now[m]) - (then[n] - then[m])).abs();
                    comp_worst = comp_worst.max(drift);
                }
            }
            if comp_worst > step_worst {
                step_worst = comp_worst;
                series.retain(|p: &ResidualPoint| p.iter != rec.iter);
                series.push(ResidualPoint {
                    iter: rec.iter,
                    component: r,
                    value: comp_worst,
                });
            }
        }
        worst = worst.max(step_worst);
    }
    Ok(DynamicsCheckReport::new(
        "balancedness_conservation",
        worst,
        tolerance,
        records.len(),
        series,
    ))
}

/// Forward-difference rate of each component norm between two adjacent
/// records, as `(σ(t+η) − σ(t)) / η`.
fn forward_rates(records: &[TrajectoryRecord]) -> Result<Vec<(&TrajectoryRecord, Vec<f64>)>> {
    let mut out = Vec::with_capacity(records.len().saturating_sub(1));
    for w in records.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if b.iter != a.iter + 1 {
            return Err(Error::config(format!(
                "records at iterations {} and {} are not one step apart; record every step",
                a.iter, b.iter
            )));
        }
        let dt = b.time - a.time;
        if !(dt > 0.0) {
            return Err(Error::config(format!("non-positive time step at iteration {}", a.iter)));
        }
        let rates = a
            .component_norms
            .iter()
            .zip(&b.component_norms)
            .map(|(s0, s1)| (s1 - s0) / dt)
            .collect();
        out.push((a, rates));
    }
    Ok(out)
}

/// Right-hand side of the balanced norm ODE.
pub fn balanced_rate(order: usize, gamma: f64, sigma: f64) -> f64 {
    let n = order as f64;
    n * gamma * sigma.powf(2.0 - 2.0 / n)
}

/// Bounds on `dσ/dt` for unbalancedness `eps`, returned as `(lower, upper)`.
pub fn rate_bounds(order: usize, gamma: f64, sigma: f64, eps: f64) -> (f64, f64) {
    let n = order as f64;
    let s2n = sigma.powf(2.0 / n);
    let wide = n * gamma * (s2n + eps).powf(n - 1.0);
    let narrow = n * gamma * sigma * sigma / (s2n + eps);
    if gamma >= 0.0 {
        (narrow, wide)
    } else {
        (wide, narrow)
    }
}

/// Relative residual between the forward-difference rate and the ODE,
/// `|rate − rhs| / max(|rhs|, |rate|)`, over components with `σ ≥ floor`.
/// The records must come from consecutive steps of a balanced run.
pub fn check_norm_ode(
    records: &[TrajectoryRecord],
    order: usize,
    floor: f64,
    tolerance: f64,
) -> Result<DynamicsCheckReport> {
    let rates = forward_rates(records)?;
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut series = Vec::new();
    for (rec, rate) in rates {
        for (r, (&sigma, &fd)) in rec.component_norms.iter().zip(&rate).enumerate() {
            let rhs = balanced_rate(order, rec.gammas[r], sigma);
            if sigma == 0.0 {
                // Zero components stay zero; both sides vanish.
                worst = worst.max(fd.abs());
                continue;
            }
            if sigma < floor {
                continue;
            }
            let scale = rhs.abs().max(fd.abs());
            let residual = if scale == 0.0 { 0.0 } else { (fd - rhs).abs() / scale };
            checked += 1;
            if residual > worst {
                worst = residual;
            }
            series.push(ResidualPoint {
                iter: rec.iter,
                component: r,
                value: residual,
            });
        }
    }
    Ok(DynamicsCheckReport::new("norm_ode", worst, tolerance, checked, series))
}

/// Checks the forward-difference rate lies within the unbalanced bounds,
/// allowing `slack · (1 + |γ|)`. The reported violation is the largest
/// excursion outside the bounds divided by `1 + |γ|`.
pub fn check_rate_bounds(
    records: &[TrajectoryRecord],
    order: usize,
    eps: f64,
    slack: f64,
) -> Result<DynamicsCheckReport> {
    let rates = forward_rates(records)?;
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut series = Vec::new();
    for (rec, rate) in rates {
        for (r, (&sigma, &fd)) in rec.component_norms.iter().zip(&rate).enumerate() {
            if sigma <= 0.0 {
                continue;
            }
            let g = rec.gammas[r];
            let (lo, hi) = rate_bounds(order, g, sigma, eps);
            let excursion = (lo - fd).max(fd - hi).max(0.0) / (1.0 + g.abs());
            checked += 1;
            worst = worst.max(excursion);
            series.push(ResidualPoint {
                iter: rec.iter,
                component: r,
                value: excursion,
            });
        }
    }
    Ok(DynamicsCheckReport::new("norm_rate_bounds", worst, slack, checked, series))
}

/// Tightest relative position of the rates inside the bounds: the largest
/// excursion divided by the bound width scale `max(|lower|, |upper|)`.
pub fn relative_bound_excursion(records: &[TrajectoryRecord], order: usize, eps: f64) -> Result<f64> {
    let rates = forward_rates(records)?;
    let mut worst = 0.0f64;
    for (rec, rate) in rates {
        for (r, (&sigma, &fd)) in rec.component_norms.iter().zip(&rate).enumerate() {
            if sigma <= 0.0 {
                continue;
            }
            let (lo, hi) = rate_bounds(order, rec.gammas[r], sigma, eps);
            let scale = lo.abs().max(hi.abs());
            if scale > 0.0 {
                worst = worst.max((lo - fd).max(fd - hi).max(0.0) / scale);
            }
        }
    }
    Ok(worst)
}

/// Window `[enter, leave]` (cumulative time) during which a norm series
/// rises from `lo_frac` to `hi_frac` of its final value: the last time it
/// is below `lo_frac·final` and the first time after that it reaches
/// `hi_frac·final`.
pub fn growth_window(times: &[f64], norms: &[f64], lo_frac: f64, hi_frac: f64) -> Option<(f64, f64)> {
    let last = *norms.last()?;
    if !(last > 0.0) || times.len() != norms.len() {
        return None;
    }
    let start = norms.iter().rposition(|&s| s < lo_frac * last)?;
    let end = (start..norms.len()).find(|&k| norms[k] >= hi_frac * last)?;
    Some((times[start], times[end]))
}

/// Growth windows of the `k` largest final components, ordered by when
/// their windows end.
pub fn incremental_windows(records: &[TrajectoryRecord], k: usize) -> Vec<(usize, (f64, f64))> {
    let Some(last) = records.last() else {
        return Vec::new();
    };
    let mut order: Vec<usize> = (0..last.component_norms.len()).collect();
    order.sort_by(|&a, &b| last.component_norms[b].total_cmp(&last.component_norms[a]));
    let times: Vec<f64> = records.iter().map(|r| r.time).collect();
    let mut windows: Vec<(usize, (f64, f64))> = order
        .into_iter()
        .take(k)
        .filter_map(|r| {
            let series: Vec<f64> = records.iter().map(|rec| rec.component_norms[r]).collect();
            growth_window(&times, &series, 0.1, 0.9).map(|w| (r, w))
        })
        .collect();
    windows.sort_by(|a, b| a.1 .1.total_cmp(&b.1 .1));
    windows
}

/// True when each window starts after the previous one started and ends
/// strictly after the previous one ended.
pub fn windows_are_ordered(windows: &[(usize, (f64, f64))]) -> bool {
    windows
        .windows(2)
        .all(|w| w[1].1 .1 > w[0].1 .1 && w[1].1 .0 >= w[0].1 .0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cp::{initialize, InitSpec};
    use crate::optim::{train, TrainConfig};
    use crate::problems::{generate_ground_truth, sample_observations, GroundTruthSpec};
    use crate::tensor::{inner, outer_product, Shape};

    fn instance(seed: u64) -> Problem {
        let s = Shape::new(vec![4, 3, 5]).unwrap();
        let gt = generate_ground_truth(&GroundTruthSpec::new(s, 2, seed)).unwrap();
        Problem::Completion(sample_observations(&gt, 30, seed).unwrap())
    }

    #[test]
    fn gamma_matches_dense_oracle_and_cauchy_schwarz() {
        let p = instance(2);
        let f = initialize(&InitSpec::gaussian(0.5, 9), p.shape(), 4).unwrap();
        for kind in [LossKind::half_squared(), LossKind::Huber { delta: 0.05 }] {
            let g = loss_gradient_tensor(&f, &p, kind).unwrap();
            let dense = g.to_dense();
            for r in 0..4 {
                let unit = outer_product(&f.component_directions(r)).unwrap();
                let expected = -inner(&dense, &unit).unwrap();
                let got = gamma(&f, &p, kind, r).unwrap();
                assert!((got - expected).abs() <= 1e-12 * (1.0 + expected.abs()));
                assert!(got.abs() <= g.norm() * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn gamma_of_zero_component_is_zero() {
        let p = instance(3);
        let mut f = initialize(&InitSpec::gaussian(0.5, 1), p.shape(), 2).unwrap();
        f.set_vector(1, 2, &[0.0; 5]).unwrap();
        assert_eq!(gamma(&f, &p, LossKind::half_squared(), 1).unwrap(), 0.0);
        assert!(gamma(&f, &p, LossKind::half_squared(), 2).is_err());
    }

    #[test]
    fn bounds_collapse_when_balanced() {
        for &(n, g, s) in &[(3usize, 0.7, 0.2), (4, -1.3, 2.0), (2, 0.1, 1e-3)] {
            let (lo, hi) = rate_bounds(n, g, s, 0.0);
            let rhs = balanced_rate(n, g, s);
            assert!((lo - rhs).abs() <= 1e-12 * rhs.abs());
            assert!((hi - rhs).abs() <= 1e-12 * rhs.abs());
        }
        // Positive γ: lower ≤ upper; negative γ: still ordered.
        let (lo, hi) = rate_bounds(3, 0.5, 0.3, 0.4);
        assert!(lo < hi);
        let (lo, hi) = rate_bounds(3, -0.5, 0.3, 0.4);
        assert!(lo < hi);
    }

    #[test]
    fn frozen_trajectory_passes_everything() {
        let p = instance(4);
        let zero = CpFactorization::zeros(p.shape().clone(), 3).unwrap();
        let out = train(zero, &p, LossKind::half_squared(), &TrainConfig::fixed(1e-2, 20)).unwrap();
        let cons = check_balancedness_conservation(&out.records, 0.0).unwrap();
        assert!(cons.pass);
        let ode = check_norm_ode(&out.records, 3, 1e-6, 0.0).unwrap();
        assert!(ode.pass);
        assert_eq!(ode.checked, 0);
    }

    #[test]
    fn balanced_small_step_run_follows_ode() {
        let p = instance(5);
        let f = initialize(&InitSpec::balanced_gaussian(0.4, 3), p.shape(), 3).unwrap();
        let out = train(f, &p, LossKind::half_squared(), &TrainConfig::fixed(1e-4, 200)).unwrap();
        let cons = check_balancedness_conservation(&out.records, 1e-6).unwrap();
        assert!(cons.pass, "{cons:?}");
        let ode = check_norm_ode(&out.records, 3, 1e-6, 1e-2).unwrap();
        assert!(ode.pass, "max residual {}", ode.max_violation);
        assert!(ode.checked > 0);
        let thm = check_rate_bounds(&out.records, 3, 0.0, 1e-6).unwrap();
        assert!(thm.pass, "{}", thm.max_violation);
    }

    #[test]
    fn ode_residual_shrinks_with_step_size() {
        let p = instance(6);
        let f = initialize(&InitSpec::balanced_gaussian(0.4, 7), p.shape(), 2).unwrap();
        let residual = |lr: f64| {
            let out = train(f.clone(), &p, LossKind::half_squared(), &TrainConfig::fixed(lr, 50)).unwrap();
            check_norm_ode(&out.records, 3, 1e-6, 1.0).unwrap().max_violation
        };
        let (a, b) = (residual(1e-3), residual(5e-4));
        assert!(b < a, "{a} {b}");
    }

    #[test]
    fn negative_gamma_branch_is_bounded() {
        // Start the single component aligned with +∇L(0) so γ < 0 and the
        // norm shrinks; unbalance one mode.
        let p = instance(7);
        let zero = CpFactorization::zeros(p.shape().clone(), 1).unwrap();
        let g = loss_gradient_tensor(&zero, &p, LossKind::half_squared()).unwrap().to_dense();
        // Rank-one proxy: best mode vectors by power iteration on the dense gradient.
        let mut vecs: Vec<Vec<f64>> = p.shape().dims().iter().map(|&d| vec![1.0; d]).collect();
        for _ in 0..50 {
            for n in 0..3 {
                let m = crate::tensor::matricize(&g, n).unwrap();
                let k = crate::tensor::kron_except(&vecs, n).unwrap();
                let mut v = m.matvec(&k).unwrap();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter_mut().for_each(|x| *x /= norm);
                vecs[n] = v;
            }
        }
        let scales = [0.5f64.sqrt() * 0.6, 0.6, 0.6];
        let weights = vec![vecs.iter().zip(scales).map(|(v, s)| v.iter().map(|x| x * s).collect()).collect()];
        let f = CpFactorization::from_weights(p.shape().clone(), weights).unwrap();
        let eps = f.unbalancedness_magnitude();
        let out = train(f, &p, LossKind::half_squared(), &TrainConfig::fixed(1e-4, 100)).unwrap();
        assert!(out.records[0].gammas[0] < 0.0);
        let thm = check_rate_bounds(&out.records, 3, eps, 1e-6).unwrap();
        assert!(thm.pass, "{}", thm.max_violation);
    }

    #[test]
    fn non_adjacent_records_are_rejected() {
        let p = instance(8);
        let f = initialize(&InitSpec::balanced_gaussian(0.3, 1), p.shape(), 2).unwrap();
        let cfg = TrainConfig {
            record_every: 2,
            ..TrainConfig::fixed(1e-3, 10)
        };
        let out = train(f, &p, LossKind::half_squared(), &cfg).unwrap();
        assert!(check_norm_ode(&out.records, 3, 1e-6, 1e-2).is_err());
    }

    #[test]
    fn growth_window_on_logistic_series() {
        let times: Vec<f64> = (0..200).map(|i| i as f64).collect();
        let norms = |c: f64| -> Vec<f64> { times.iter().map(|t| 1.0 / (1.0 + (-(t - c) / 5.0).exp())).collect() };
        let (a0, a1) = growth_window(&times, &norms(50.0), 0.1, 0.9).unwrap();
        let (b0, b1) = growth_window(&times, &norms(120.0), 0.1, 0.9).unwrap();
        assert!(a0 < a1 && b0 < b1 && a1 < b1);
        // logistic: 10% at c − 5 ln 9, 90% at c + 5 ln 9
        assert!((a0 - (50.0 - 5.0 * 9f64.ln()).floor()).abs() <= 1.0);
        assert!(windows_are_ordered(&[(0, (a0, a1)), (1, (b0, b1))]));
        assert!(!windows_are_ordered(&[(1, (b0, b1)), (0, (a0, a1))]));
    }
}
