//! Synthetic ground truths, observation/measurement sampling, and a sampled
//! lower bound on the 1-RIP constant of a measurement set.

use rand::seq::index;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cp::{random_unit_vector, CpFactorization};
use crate::error::{Error, Result};
use crate::loss::{MeasurementSet, Observation, ObservationSet};
use crate::rng::{self, Stream};
use crate::tensor::{dot, outer_product, Shape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthSpec {
    pub shape: Shape,
    pub rank: usize,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub normalize: bool,
}

fn default_true() -> bool {
    true
}

impl GroundTruthSpec {
    pub fn new(shape: Shape, rank: usize, seed: u64) -> Self {
        Self {
            shape,
            rank,
            seed,
            normalize: true,
        }
    }
}

/// Ground-truth factors with i.i.d. standard normal entries, scaled so the
/// resulting tensor has unit Frobenius norm when `normalize` is set.
pub fn ground_truth_factors(spec: &GroundTruthSpec) -> Result<CpFactorization> {
    if spec.rank == 0 {
        return Err(Error::config("ground-truth rank must be at least 1"));
    }
    let mut rng = rng::stream(spec.seed, Stream::GroundTruth);
    loop {
        let mut f = CpFactorization::zeros(spec.shape.clone(), spec.rank)?;
        for r in 0..spec.rank {
            for n in 0..spec.shape.order() {
                let v: Vec<f64> = (0..spec.shape.dims()[n]).map(|_| StandardNormal.sample(&mut rng)).collect();
                f.set_vector(r, n, &v)?;
            }
        }
        if !spec.normalize {
            return Ok(f);
        }
        let norm = f.end_tensor().norm();
        if norm > 0.0 {
            // Spread the rescale evenly over the modes.
            return Ok(f.scaled(norm.powf(-1.0 / spec.shape.order() as f64)));
        }
    }
}

pub fn generate_ground_truth(spec: &GroundTruthSpec) -> Result<Tensor> {
    let t = ground_truth_factors(spec)?.end_tensor();
    if spec.normalize {
        // Exact unit norm regardless of the rounding in the factor rescale.
        let norm = t.norm();
        return Ok(t.scale(1.0 / norm));
    }
    Ok(t)
}

/// `count` distinct entries chosen uniformly without repetition.
pub fn sample_observations(truth: &Tensor, count: usize, seed: u64) -> Result<ObservationSet> {
    let shape = truth.shape();
    if count == 0 {
        return Err(Error::Empty("observation count"));
    }
    if count > shape.numel() {
        return Err(Error::config(format!(
            "cannot sample {count} distinct entries from {} available",
            shape.numel()
        )));
    }
    let mut rng = rng::stream(seed, Stream::Observations);
    let picks = index::sample(&mut rng, shape.numel(), count);
    let entries = picks
        .iter()
        .map(|flat| Observation {
            index: shape.unravel(flat),
            value: truth.data()[flat],
        })
        .collect();
    ObservationSet::new(shape.clone(), entries)
}

/// Entry standard deviation `(Π d_n)^{-1/2}`, giving `E‖A‖² = 1`.
pub fn measurement_std(shape: &Shape) -> f64 {
    (shape.numel() as f64).sqrt().recip()
}

/// `m` Gaussian measurement tensors with values `y_i = ⟨A_i, W*⟩`. Draws
/// are rounded to single precision, which halves the memory the sensing
/// loop streams; `y_i` is computed from the rounded entries.
pub fn sample_measurements(truth: &Tensor, m: usize, seed: u64) -> Result<MeasurementSet> {
    let shape = truth.shape().clone();
    if m == 0 {
        return Err(Error::Empty("measurement count"));
    }
    let normal = Normal::new(0.0, measurement_std(&shape)).map_err(|e| Error::config(e.to_string()))?;
    let mut rng = rng::stream(seed, Stream::Measurements);
    let numel = shape.numel();
    let a: Vec<f64> = (0..m * numel)
        .map(|_| f64::from(normal.sample(&mut rng) as f32))
        .collect();
    let y = a.chunks_exact(numel).map(|row| dot(row, truth.data())).collect();
    MeasurementSet::from_flat(shape, a, y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RipEstimate {
    /// Sampled lower bound on the 1-RIP constant of the set as given.
    pub delta_lower_bound: f64,
    /// Same bound after rescaling every `A_i` by `√(Π d_n / m)`, which makes
    /// `E Σ_i ⟨A_i, W⟩² = ‖W‖²` for the Gaussian measurements sampled here.
    pub normalized_delta_lower_bound: f64,
    pub min_energy: f64,
    pub max_energy: f64,
    pub trials: usize,
    /// Running maximum deviation after each trial.
    pub running: Vec<f64>,
}

/// Probes random unit-norm rank-one tensors `W` and reports the largest
/// observed `|Σ_i ⟨A_i, W⟩² − 1|`. A supremum over all rank-one tensors
/// can only be larger, so this is a lower bound on the true constant.
pub fn estimate_rip_delta(meas: &MeasurementSet, rank: usize, trials: usize, seed: u64) -> Result<RipEstimate> {
    if rank != 1 {
        return Err(Error::config("only rank-one RIP probing is supported"));
    }
    if trials == 0 {
        return Err(Error::Empty("RIP trials"));
    }
    let shape = meas.shape();
    let mut rng = rng::stream(seed, Stream::Rip);
    let mut min_energy = f64::INFINITY;
    let mut max_energy = f64::NEG_INFINITY;
    let mut worst = 0.0f64;
    let mut worst_normalized = 0.0f64;
    let normalization = shape.numel() as f64 / meas.len() as f64;
    let mut running = Vec::with_capacity(trials);
    for _ in 0..trials {
        let vectors: Vec<Vec<f64>> = shape.dims().iter().map(|&d| random_unit_vector(&mut rng, d)).collect();
        let w = outer_product(&vectors)?;
        let energy: f64 = meas.measure(&w)?.iter().map(|v| v * v).sum();
        min_energy = min_energy.min(energy);
        max_energy = max_energy.max(energy);
        worst = worst.max((energy - 1.0).abs());
        worst_normalized = worst_normalized.max((energy * normalization - 1.0).abs());
        running.push(worst);
    }
    Ok(RipEstimate {
        delta_lower_bound: worst,
        normalized_delta_lower_bound: worst_normalized,
        min_energy,
        max_energy,
        trials,
        running,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::matricize;

    fn shape(d: &[usize]) -> Shape {
        Shape::new(d.to_vec()).unwrap()
    }

    #[test]
    fn ground_truth_is_unit_norm_and_reproducible() {
        let spec = GroundTruthSpec::new(shape(&[4, 5, 3]), 3, 42);
        let a = generate_ground_truth(&spec).unwrap();
        assert!((a.norm() - 1.0).abs() < 1e-12);
        assert_eq!(a, generate_ground_truth(&spec).unwrap());
        let other = generate_ground_truth(&GroundTruthSpec::new(shape(&[4, 5, 3]), 3, 43)).unwrap();
        assert_ne!(a, other);
        let factors = ground_truth_factors(&spec).unwrap();
        assert!((factors.end_tensor().norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rank_one_truth_has_rank_one_unfoldings() {
        let t = generate_ground_truth(&GroundTruthSpec::new(shape(&[4, 5, 3]), 1, 7)).unwrap();
        for mode in 0..3 {
            let m = matricize(&t, mode).unwrap();
            let mat = nalgebra::DMatrix::from_row_slice(m.rows(), m.cols(), m.data());
            let sv = mat.singular_values();
            let top = sv.max();
            let rest = sv.iter().filter(|&&s| s < top).fold(0.0f64, |a, &s| a.max(s));
            assert!(rest <= 1e-12 * top, "mode {mode}: {sv:?}");
        }
    }

    #[test]
    fn observation_sampling() {
        let s = shape(&[10, 10, 10, 10]);
        let t = Tensor::from_fn(s.clone(), |idx| s.flat_index(idx).unwrap() as f64);
        let obs = sample_observations(&t, 2000, 3).unwrap();
        assert_eq!(obs.len(), 2000);
        for (idx, v) in obs.iter() {
            assert_eq!(v, s.flat_index(idx).unwrap() as f64);
        }
        let small = Tensor::from_fn(shape(&[2, 3]), |idx| (idx[0] * 3 + idx[1]) as f64);
        let all = sample_observations(&small, 6, 1).unwrap();
        let mut seen: Vec<f64> = all.values().to_vec();
        seen.sort_by(f64::total_cmp);
        assert_eq!(seen, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        assert!(sample_observations(&small, 7, 1).is_err());
    }

    #[test]
    fn observation_sampling_is_uniform() {
        // Chi-square over 20 cells, 3 draws each from 2000 trials.
        let s = shape(&[4, 5]);
        let t = Tensor::from_fn(s.clone(), |idx| s.flat_index(idx).unwrap() as f64);
        let mut counts = [0usize; 20];
        for seed in 0..2000 {
            for &v in sample_observations(&t, 3, seed).unwrap().values() {
                counts[v as usize] += 1;
            }
        }
        let expected = 2000.0 * 3.0 / 20.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 99th percentile of chi-square with 19 degrees of freedom.
        assert!(chi2 < 36.19, "chi2 = {chi2}");
    }

    #[test]
    fn measurement_scale() {
        assert_eq!(measurement_std(&shape(&[10, 10, 10, 10])), 1e-2);
        assert_eq!(measurement_std(&shape(&[2, 2])), 0.5);
        let s = shape(&[3, 4, 5]);
        let zero = Tensor::zeros(s.clone());
        let meas = sample_measurements(&zero, 1000, 9).unwrap();
        let mean_sq: f64 = (0..meas.len())
            .map(|i| meas.sensor(i).iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            / 1000.0;
        assert!((0.9..=1.1).contains(&mean_sq), "{mean_sq}");
    }

    #[test]
    fn measurement_values_are_exact_inner_products() {
        let s = shape(&[3, 3, 2]);
        let t = generate_ground_truth(&GroundTruthSpec::new(s, 2, 1)).unwrap();
        let meas = sample_measurements(&t, 20, 2).unwrap();
        assert_eq!(meas.measure(&t).unwrap(), meas.values());
    }

    #[test]
    fn rip_of_orthonormal_basis_is_zero() {
        let s = shape(&[2, 3, 2]);
        let basis: Vec<Tensor> = (0..s.numel())
            .map(|k| Tensor::from_fn(s.clone(), |idx| f64::from(s.flat_index(idx).unwrap() == k)))
            .collect();
        let meas = MeasurementSet::new(basis, vec![0.0; s.numel()]).unwrap();
        let est = estimate_rip_delta(&meas, 1, 50, 3).unwrap();
        assert!(est.delta_lower_bound < 1e-12);
        assert!(estimate_rip_delta(&meas, 2, 5, 3).is_err());
    }

    #[test]
    fn rip_single_measurement_is_far_from_isometric() {
        let s = shape(&[10, 10, 10]);
        let meas = sample_measurements(&Tensor::zeros(s), 1, 5).unwrap();
        let est = estimate_rip_delta(&meas, 1, 200, 1).unwrap();
        assert!(est.delta_lower_bound > 0.9, "{est:?}");
        assert!(est.running.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn rip_gaussian_measurements_are_near_isometric() {
        let s = shape(&[10, 10, 10, 10]);
        let meas = sample_measurements(&Tensor::zeros(s), 2000, 5).unwrap();
        let est = estimate_rip_delta(&meas, 1, 20, 1).unwrap();
        // Unnormalized energies concentrate at m / Π d_n = 0.2.
        assert!((est.delta_lower_bound - 0.8).abs() < 0.1, "{est:?}");
        assert!(est.normalized_delta_lower_bound < 0.5, "{est:?}");
        assert!(est.running.windows(2).all(|w| w[0] <= w[1]));
    }
}
