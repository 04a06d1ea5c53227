//! CP factorization: `W_e = Σ_r w_r^1 ⊗ … ⊗ w_r^N`.
//!
//! Weights are stored as one factor matrix per mode, `d_n × R` row-major,
//! so the `R` values touched by a single tensor index are contiguous.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::{dot, outer_product, Shape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Checkpoint", into = "Checkpoint")]
pub struct CpFactorization {
    shape: Shape,
    rank: usize,
    factors: Vec<Vec<f64>>,
}

/// On-disk form: `weights[r][n]` is the length-`d_n` vector `w_r^n`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub shape: Vec<usize>,
    #[serde(rename = "R")]
    pub rank: usize,
    pub weights: Vec<Vec<Vec<f64>>>,
}

impl TryFrom<Checkpoint> for CpFactorization {
    type Error = Error;

    fn try_from(c: Checkpoint) -> Result<Self> {
        let shape = Shape::new(c.shape)?;
        if c.weights.len() != c.rank {
            return Err(Error::InvalidShape(format!(
                "checkpoint declares R={} but holds {} components",
                c.rank,
                c.weights.len()
            )));
        }
        CpFactorization::from_weights(shape, c.weights)
    }
}

impl From<CpFactorization> for Checkpoint {
    fn from(f: CpFactorization) -> Self {
        Checkpoint {
            shape: f.shape.dims().to_vec(),
            rank: f.rank,
            weights: f.weights(),
        }
    }
}

impl CpFactorization {
    pub fn zeros(shape: Shape, rank: usize) -> Result<Self> {
        if rank == 0 {
            return Err(Error::InvalidShape("number of components must be positive".into()));
        }
        let factors = shape.dims().iter().map(|&d| vec![0.0; d * rank]).collect();
        Ok(Self {
            shape,
            rank,
            factors,
        })
    }

    /// Builds from nested `weights[r][n]`.
    pub fn from_weights(shape: Shape, weights: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let mut f = Self::zeros(shape, weights.len())?;
        for (r, comp) in weights.iter().enumerate() {
            if comp.len() != f.order() {
                return Err(Error::InvalidShape(format!(
                    "component {r} has {} vectors, expected {}",
                    comp.len(),
                    f.order()
                )));
            }
            for (n, v) in comp.iter().enumerate() {
                f.set_vector(r, n, v)?;
            }
        }
        Ok(f)
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn order(&self) -> usize {
        self.shape.order()
    }

    /// Factor matrix of mode `n`, `d_n × R` row-major.
    pub fn factor(&self, n: usize) -> &[f64] {
        &self.factors[n]
    }

    pub(crate) fn factors(&self) -> &[Vec<f64>] {
        &self.factors
    }

    pub fn vector(&self, r: usize, n: usize) -> Vec<f64> {
        self.factors[n].iter().skip(r).step_by(self.rank).copied().collect()
    }

    pub fn set_vector(&mut self, r: usize, n: usize, v: &[f64]) -> Result<()> {
        let d = self.shape.dims()[n];
        if v.len() != d {
            return Err(Error::ShapeMismatch {
                expected: vec![d],
                actual: vec![v.len()],
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("weight vector"));
        }
        for (i, &x) in v.iter().enumerate() {
            self.factors[n][i * self.rank + r] = x;
        }
        Ok(())
    }

    pub fn component_vectors(&self, r: usize) -> Vec<Vec<f64>> {
        (0..self.order()).map(|n| self.vector(r, n)).collect()
    }

    pub fn weights(&self) -> Vec<Vec<Vec<f64>>> {
        (0..self.rank).map(|r| self.component_vectors(r)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.factors.iter().flatten().all(|x| x.is_finite())
    }

    /// Materializes `Σ_r ⊗_n w_r^n`.
    pub fn end_tensor(&self) -> Tensor {
        let order = self.order();
        let rank = self.rank;
        // Running products over leading indices, one length-R row each;
        // the last mode is summed straight into the output.
        let mut partial = vec![1.0; rank];
        for n in 0..order - 1 {
            let d = self.shape.dims()[n];
            let mut next = Vec::with_capacity(partial.len() * d);
            for p in partial.chunks_exact(rank) {
                for row in self.factors[n].chunks_exact(rank) {
                    next.extend(p.iter().zip(row).map(|(a, b)| a * b));
                }
            }
            partial = next;
        }
        let mut data = Vec::with_capacity(self.shape.numel());
        for p in partial.chunks_exact(rank) {
            for row in self.factors[order - 1].chunks_exact(rank) {
                data.push(p.iter().zip(row).map(|(a, b)| a * b).sum());
            }
        }
        Tensor::from_raw(self.shape.clone(), data)
    }

    pub fn component_tensor(&self, r: usize) -> Tensor {
        outer_product(&self.component_vectors(r)).expect("factorization order is at least 1")
    }

    pub fn predict(&self, index: &[usize]) -> Result<f64> {
        self.shape.check_index(index)?;
        Ok(self.predict_unchecked(index))
    }

    pub(crate) fn predict_unchecked(&self, index: &[usize]) -> f64 {
        let rank = self.rank;
        let mut acc = 0.0;
        for r in 0..rank {
            let mut p = 1.0;
            for (n, &i) in index.iter().enumerate() {
                p *= self.factors[n][i * rank + r];
            }
            acc += p;
        }
        acc
    }

    pub fn vector_sq_norms(&self, r: usize) -> Vec<f64> {
        (0..self.order())
            .map(|n| {
                self.factors[n]
                    .iter()
                    .skip(r)
                    .step_by(self.rank)
                    .map(|x| x * x)
                    .sum()
            })
            .collect()
    }

    /// `‖⊗_n w_r^n‖ = Π_n ‖w_r^n‖`.
    pub fn component_norm(&self, r: usize) -> f64 {
        self.vector_sq_norms(r).iter().map(|s| s.sqrt()).product()
    }

    pub fn component_norms(&self) -> Vec<f64> {
        (0..self.rank).map(|r| self.component_norm(r)).collect()
    }

    /// Normalized weight vectors of component `r`; a zero vector maps to zero.
    pub fn component_directions(&self, r: usize) -> Vec<Vec<f64>> {
        self.component_vectors(r)
            .into_iter()
            .map(|v| {
                let norm = dot(&v, &v).sqrt();
                if norm == 0.0 {
                    v
                } else {
                    v.into_iter().map(|x| x / norm).collect()
                }
            })
            .collect()
    }

    /// `max_{r, n, n̄} |‖w_r^n‖² − ‖w_r^n̄‖²|`.
    pub fn unbalancedness_magnitude(&self) -> f64 {
        (0..self.rank)
            .map(|r| {
                let sq = self.vector_sq_norms(r);
                let hi = sq.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lo = sq.iter().copied().fold(f64::INFINITY, f64::min);
                hi - lo
            })
            .fold(0.0, f64::max)
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        let mut out = self.clone();
        for x in out.factors.iter_mut().flatten() {
            *x *= alpha;
        }
        out
    }

    /// Rescales every vector of each component to the geometric mean of that
    /// component's vector norms. Directions and component tensors are kept;
    /// the result has unbalancedness zero.
    pub fn balanced(&self) -> Self {
        let mut out = self.clone();
        let order = self.order() as f64;
        for r in 0..self.rank {
            let norms: Vec<f64> = self.vector_sq_norms(r).iter().map(|s| s.sqrt()).collect();
            let geo = if norms.contains(&0.0) {
                0.0
            } else {
                (norms.iter().map(|x| x.ln()).sum::<f64>() / order).exp()
            };
            for (n, &norm) in norms.iter().enumerate() {
                let factor = if norm == 0.0 { 0.0 } else { geo / norm };
                let rank = self.rank;
                for x in out.factors[n].iter_mut().skip(r).step_by(rank) {
                    *x *= factor;
                }
            }
        }
        out
    }

    /// Keeps only the listed components, in order.
    pub fn select_components(&self, components: &[usize]) -> Result<Self> {
        let weights = components
            .iter()
            .map(|&r| {
                if r < self.rank {
                    Ok(self.component_vectors(r))
                } else {
                    Err(Error::config(format!("component {r} out of range")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_weights(self.shape.clone(), weights)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
    }
}

/// Gradient with the same layout as [`CpFactorization`].
#[derive(Debug, Clone, PartialEq)]
pub struct CpGradient {
    pub(crate) rank: usize,
    pub(crate) factors: Vec<Vec<f64>>,
}

impl CpGradient {
    pub fn zeros_like(f: &CpFactorization) -> Self {
        Self {
            rank: f.rank,
            factors: f.factors.iter().map(|m| vec![0.0; m.len()]).collect(),
        }
    }

    pub fn block(&self, r: usize, n: usize) -> Vec<f64> {
        self.factors[n].iter().skip(r).step_by(self.rank).copied().collect()
    }

    pub fn factor(&self, n: usize) -> &[f64] {
        &self.factors[n]
    }

    /// Nested `[r][n]` form.
    pub fn blocks(&self) -> Vec<Vec<Vec<f64>>> {
        (0..self.rank)
            .map(|r| (0..self.factors.len()).map(|n| self.block(r, n)).collect())
            .collect()
    }

    /// `Σ_{r,n} ‖∂φ/∂w_r^n‖²`.
    pub fn sq_norm(&self) -> f64 {
        self.factors.iter().flatten().map(|x| x * x).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.factors.iter().flatten().all(|x| x.is_finite())
    }

    pub(crate) fn clear(&mut self) {
        for x in self.factors.iter_mut().flatten() {
            *x = 0.0;
        }
    }
}

impl CpFactorization {
    /// `w ← w − lr · g`.
    pub fn descend(&mut self, grad: &CpGradient, lr: f64) {
        for (w, g) in self.factors.iter_mut().zip(&grad.factors) {
            for (a, b) in w.iter_mut().zip(g) {
                *a -= lr * b;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitKind {
    Gaussian {
        #[serde(default)]
        mean: f64,
        std: f64,
    },
    BalancedGaussian {
        std: f64,
    },
    Scaled {
        base: Box<CpFactorization>,
        alpha: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitSpec {
    #[serde(flatten)]
    pub kind: InitKind,
    pub seed: u64,
}

impl InitSpec {
    pub fn gaussian(std: f64, seed: u64) -> Self {
        Self {
            kind: InitKind::Gaussian { mean: 0.0, std },
            seed,
        }
    }

    pub fn balanced_gaussian(std: f64, seed: u64) -> Self {
        Self {
            kind: InitKind::BalancedGaussian { std },
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.kind {
            InitKind::Gaussian { std, mean } => {
                if !(*std > 0.0 && std.is_finite() && mean.is_finite()) {
                    return Err(Error::config(format!("init std must be positive, got {std}")));
                }
            }
            InitKind::BalancedGaussian { std } => {
                if !(*std > 0.0 && std.is_finite()) {
                    return Err(Error::config(format!("init std must be positive, got {std}")));
                }
            }
            InitKind::Scaled { alpha, .. } => {
                if !(*alpha > 0.0 && alpha.is_finite()) {
                    return Err(Error::config(format!("init alpha must be positive, got {alpha}")));
                }
            }
        }
        Ok(())
    }
}

pub fn initialize(spec: &InitSpec, shape: &Shape, rank: usize) -> Result<CpFactorization> {
    spec.validate()?;
    let sample = |mean: f64, std: f64| -> Result<CpFactorization> {
        let mut f = CpFactorization::zeros(shape.clone(), rank)?;
        let normal = Normal::new(mean, std).map_err(|e| Error::config(e.to_string()))?;
        let mut rng = rng::stream(spec.seed, Stream::Init);
        // Draw in [r][n][i] order so the sample does not depend on storage layout.
        for r in 0..rank {
            for n in 0..shape.order() {
                let v: Vec<f64> = (0..shape.dims()[n]).map(|_| normal.sample(&mut rng)).collect();
                f.set_vector(r, n, &v)?;
            }
        }
        Ok(f)
    };
    match &spec.kind {
        InitKind::Gaussian { mean, std } => sample(*mean, *std),
        InitKind::BalancedGaussian { std } => Ok(sample(0.0, *std)?.balanced()),
        InitKind::Scaled { base, alpha } => {
            base.shape().expect_same(shape)?;
            if base.rank() != rank {
                return Err(Error::config(format!(
                    "scaled init base has R={}, requested R={rank}",
                    base.rank()
                )));
            }
            Ok(base.scaled(*alpha))
        }
    }
}

/// `(Π d_n) / max d_n` components suffice to express every tensor of the shape.
pub fn sufficient_rank(shape: &Shape) -> usize {
    shape.numel() / shape.max_dim()
}

pub(crate) fn random_unit_vector<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
        let norm = dot(&v, &v).sqrt();
        if norm > 0.0 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}
