//! Completion and sensing objectives with closed-form gradients.
//!
//! For completion, `∂φ/∂w_r^n` is accumulated sparsely over the observed
//! entries: each observation `I` contributes
//! `(1/|Ω|) ℓ'(pred_I − y_I) · Π_{n'≠n} w_r^{n'}[i_{n'}]` to row `i_n`.
//! The products over the other modes come from prefix/suffix sweeps, so the
//! cost per observation is `O(N·R)`.
//!
//! Reductions run sequentially in input order.

use std::borrow::Cow;
use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cp::{CpFactorization, CpGradient};
use crate::error::{Error, Result};
use crate::tensor::{dot, kron_except, matricize, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    /// `coeff · z²`
    Squared { coeff: f64 },
    Huber { delta: f64 },
    /// Huber divided by `delta` (the smooth-L1 form). Same minimizers and
    /// gradient-flow paths as `Huber`, with time sped up by `1/delta`.
    ScaledHuber { delta: f64 },
}

impl Default for LossKind {
    fn default() -> Self {
        LossKind::Squared { coeff: 0.5 }
    }
}

impl LossKind {
    pub fn half_squared() -> Self {
        LossKind::Squared { coeff: 0.5 }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LossKind::Squared { coeff } if coeff == 0.5 || coeff == 1.0 => Ok(()),
            LossKind::Squared { coeff } => Err(Error::config(format!(
                "squared loss coefficient must be 0.5 or 1.0, got {coeff}"
            ))),
            LossKind::Huber { delta } | LossKind::ScaledHuber { delta } if delta > 0.0 && delta.is_finite() => {
                Ok(())
            }
            LossKind::Huber { delta } | LossKind::ScaledHuber { delta } => Err(Error::config(format!(
                "Huber transition point must be positive, got {delta}"
            ))),
        }
    }
}

pub fn scalar_loss(kind: LossKind, z: f64) -> f64 {
    match kind {
        LossKind::Squared { coeff } => coeff * z * z,
        LossKind::Huber { delta } => {
            if z.abs() < delta {
                0.5 * z * z
            } else {
                delta * (z.abs() - 0.5 * delta)
            }
        }
        LossKind::ScaledHuber { delta } => scalar_loss(LossKind::Huber { delta }, z) / delta,
    }
}

pub fn scalar_loss_derivative(kind: LossKind, z: f64) -> f64 {
    match kind {
        LossKind::Squared { coeff } => 2.0 * coeff * z,
        LossKind::Huber { delta } => z.clamp(-delta, delta),
        LossKind::ScaledHuber { delta } => z.clamp(-delta, delta) / delta,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub index: Vec<usize>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ObservationSetRepr", into = "ObservationSetRepr")]
pub struct ObservationSet {
    shape: Shape,
    /// Row-major `count × N` index tuples.
    indices: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ObservationSetRepr {
    shape: Shape,
    entries: Vec<Observation>,
}

impl TryFrom<ObservationSetRepr> for ObservationSet {
    type Error = Error;

    fn try_from(r: ObservationSetRepr) -> Result<Self> {
        ObservationSet::new(r.shape, r.entries)
    }
}

impl From<ObservationSet> for ObservationSetRepr {
    fn from(o: ObservationSet) -> Self {
        let entries = o.iter().map(|(i, v)| Observation { index: i.to_vec(), value: v }).collect();
        ObservationSetRepr {
            shape: o.shape,
            entries,
        }
    }
}

impl ObservationSet {
    pub fn new(shape: Shape, entries: Vec<Observation>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Empty("observation set"));
        }
        let mut seen = HashSet::with_capacity(entries.len());
        let mut indices = Vec::with_capacity(entries.len() * shape.order());
        let mut values = Vec::with_capacity(entries.len());
        for e in entries {
            let flat = shape.flat_index(&e.index)?;
            if !seen.insert(flat) {
                return Err(Error::config(format!("duplicate observation at {:?}", e.index)));
            }
            if !e.value.is_finite() {
                return Err(Error::NonFinite("observation value"));
            }
            indices.extend_from_slice(&e.index);
            values.push(e.value);
        }
        Ok(Self {
            shape,
            indices,
            values,
        })
    }

    /// Every entry of `t` as an observation.
    pub fn full(t: &Tensor) -> Self {
        let shape = t.shape().clone();
        let indices = (0..shape.numel()).flat_map(|flat| shape.unravel(flat)).collect();
        Self {
            shape,
            indices,
            values: t.data().to_vec(),
        }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn index(&self, k: usize) -> &[usize] {
        let n = self.shape.order();
        &self.indices[k * n..(k + 1) * n]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[usize], f64)> + '_ {
        self.indices
            .chunks_exact(self.shape.order())
            .zip(self.values.iter().copied())
    }

    pub fn min_abs_value(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    /// Flat row-major entries of `A_i`.
    pub a: Vec<f64>,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MeasurementSetRepr", into = "MeasurementSetRepr")]
pub struct MeasurementSet {
    shape: Shape,
    /// Row-major `m × numel`.
    a: Entries,
    y: Vec<f64>,
}

/// Sensing is bound by streaming the `A_i` through memory, so sets whose
/// entries are all exact in single precision are kept that way. Values
/// never change; only the storage width does.
#[derive(Debug, Clone, PartialEq)]
enum Entries {
    Wide(Vec<f64>),
    Narrow(Vec<f32>),
}

impl Entries {
    fn new(a: Vec<f64>) -> Self {
        if a.iter().all(|&x| f64::from(x as f32) == x) {
            Entries::Narrow(a.into_iter().map(|x| x as f32).collect())
        } else {
            Entries::Wide(a)
        }
    }
}

#[derive(Serialize, Deserialize)]
struct MeasurementSetRepr {
    shape: Shape,
    measurements: Vec<Measurement>,
}

impl TryFrom<MeasurementSetRepr> for MeasurementSet {
    type Error = Error;

    fn try_from(r: MeasurementSetRepr) -> Result<Self> {
        let numel = r.shape.numel();
        let mut a = Vec::with_capacity(r.measurements.len() * numel);
        let mut y = Vec::with_capacity(r.measurements.len());
        for m in r.measurements {
            if m.a.len() != numel {
                return Err(Error::ShapeMismatch {
                    expected: vec![numel],
                    actual: vec![m.a.len()],
                });
            }
            a.extend(m.a);
            y.push(m.y);
        }
        MeasurementSet::from_flat(r.shape, a, y)
    }
}

impl From<MeasurementSet> for MeasurementSetRepr {
    fn from(m: MeasurementSet) -> Self {
        let measurements = (0..m.len())
            .map(|i| Measurement {
                a: m.sensor(i).into_owned(),
                y: m.y[i],
            })
            .collect();
        MeasurementSetRepr {
            shape: m.shape,
            measurements,
        }
    }
}

impl MeasurementSet {
    pub fn new(tensors: Vec<Tensor>, values: Vec<f64>) -> Result<Self> {
        let first = tensors.first().ok_or(Error::Empty("measurement set"))?;
        let shape = first.shape().clone();
        let mut a = Vec::with_capacity(tensors.len() * shape.numel());
        for t in &tensors {
            shape.expect_same(t.shape())?;
            a.extend_from_slice(t.data());
        }
        Self::from_flat(shape, a, values)
    }

    pub fn from_flat(shape: Shape, a: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if y.is_empty() {
            return Err(Error::Empty("measurement set"));
        }
        if a.len() != y.len() * shape.numel() {
            return Err(Error::InvalidShape(format!(
                "{} measurement entries for {} measurements of {:?}",
                a.len(),
                y.len(),
                shape.dims()
            )));
        }
        if a.iter().chain(&y).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("measurement set"));
        }
        Ok(Self {
            shape,
            a: Entries::new(a),
            y,
        })
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Flat entries of `A_i`.
    pub fn sensor(&self, i: usize) -> Cow<'_, [f64]> {
        let n = self.shape.numel();
        match &self.a {
            Entries::Wide(a) => Cow::Borrowed(&a[i * n..(i + 1) * n]),
            Entries::Narrow(a) => Cow::Owned(a[i * n..(i + 1) * n].iter().map(|&x| f64::from(x)).collect()),
        }
    }

    pub fn sensor_tensor(&self, i: usize) -> Tensor {
        Tensor::from_raw(self.shape.clone(), self.sensor(i).into_owned())
    }

    /// `⟨A_i, w⟩`.
    fn sensor_dot(&self, i: usize, w: &[f64]) -> f64 {
        let n = self.shape.numel();
        match &self.a {
            Entries::Wide(a) => dot(&a[i * n..(i + 1) * n], w),
            Entries::Narrow(a) => dot(&a[i * n..(i + 1) * n], w),
        }
    }

    /// `g += c · A_i`.
    fn sensor_axpy(&self, i: usize, c: f64, g: &mut [f64]) {
        let n = self.shape.numel();
        match &self.a {
            Entries::Wide(a) => {
                for (dst, x) in g.iter_mut().zip(&a[i * n..(i + 1) * n]) {
                    *dst += c * x;
                }
            }
            Entries::Narrow(a) => {
                for (dst, &x) in g.iter_mut().zip(&a[i * n..(i + 1) * n]) {
                    *dst += c * f64::from(x);
                }
            }
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.y
    }

    /// `⟨A_i, W⟩` for every measurement.
    pub fn measure(&self, w: &Tensor) -> Result<Vec<f64>> {
        self.shape.expect_same(w.shape())?;
        Ok((0..self.len()).map(|i| self.sensor_dot(i, w.data())).collect())
    }

    /// Mean loss and dense `∇L` in a single pass over the `A_i`.
    fn loss_and_gradient(&self, w: &Tensor, kind: LossKind) -> (f64, Tensor) {
        let mut g = vec![0.0; self.shape.numel()];
        let total = match &self.a {
            Entries::Wide(a) => fused_sweep(a, &self.y, w.data(), kind, &mut g),
            Entries::Narrow(a) => fused_sweep(a, &self.y, w.data(), kind, &mut g),
        };
        (total / self.len() as f64, Tensor::from_raw(self.shape.clone(), g))
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

/// Summed loss over the rows of `a`, accumulating the mean-loss gradient
/// into `g` while each row is still in cache.
fn fused_sweep<T: Copy + Into<f64>>(a: &[T], y: &[f64], w: &[f64], kind: LossKind, g: &mut [f64]) -> f64 {
    let scale = 1.0 / y.len() as f64;
    let mut total = 0.0;
    for (row, yv) in a.chunks_exact(w.len()).zip(y) {
        let z = dot(row, w) - yv;
        total += scalar_loss(kind, z);
        let c = scale * scalar_loss_derivative(kind, z);
        if c != 0.0 {
            for (dst, &x) in g.iter_mut().zip(row) {
                *dst += c * x.into();
            }
        }
    }
    total
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = std::fs::File::create(path)?;
    serde_json::to_writer(std::io::BufWriter::new(file), value)?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let file = std::fs::File::open(path)?;
    Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Problem {
    Completion(ObservationSet),
    Sensing(MeasurementSet),
}

impl Problem {
    pub fn shape(&self) -> &Shape {
        match self {
            Problem::Completion(o) => o.shape(),
            Problem::Sensing(m) => m.shape(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Problem::Completion(o) => o.len(),
            Problem::Sensing(m) => m.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `min |y|` over observed values or measurement values.
    pub fn min_abs_target(&self) -> f64 {
        let values = match self {
            Problem::Completion(o) => o.values(),
            Problem::Sensing(m) => m.values(),
        };
        values.iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min)
    }

    /// `φ(w) = L(W_e)`.
    pub fn loss(&self, f: &CpFactorization, kind: LossKind) -> Result<f64> {
        match self {
            Problem::Completion(o) => completion_loss(f, o, kind),
            Problem::Sensing(m) => sensing_loss(f, m, kind),
        }
    }

    /// `L(W)` for an explicit tensor.
    pub fn tensor_loss(&self, w: &Tensor, kind: LossKind) -> Result<f64> {
        self.shape().expect_same(w.shape())?;
        let residuals = self.residuals(w)?;
        Ok(mean_loss(kind, &residuals))
    }

    fn residuals(&self, w: &Tensor) -> Result<Vec<f64>> {
        match self {
            Problem::Completion(o) => Ok(o
                .iter()
                .map(|(idx, y)| w.data()[o.shape.flat_index_unchecked(idx)] - y)
                .collect()),
            Problem::Sensing(m) => Ok(m
                .measure(w)?
                .into_iter()
                .zip(&m.y)
                .map(|(p, y)| p - y)
                .collect()),
        }
    }

    /// `∇L(W)` at an explicit tensor.
    pub fn loss_gradient_at(&self, w: &Tensor, kind: LossKind) -> Result<LossGradient> {
        self.shape().expect_same(w.shape())?;
        let residuals = self.residuals(w)?;
        Ok(self.gradient_from_residuals(kind, &residuals))
    }

    fn gradient_from_residuals(&self, kind: LossKind, residuals: &[f64]) -> LossGradient {
        let scale = 1.0 / residuals.len() as f64;
        match self {
            Problem::Completion(o) => LossGradient::Sparse {
                shape: o.shape.clone(),
                entries: o
                    .iter()
                    .zip(residuals)
                    .map(|((idx, _), &z)| {
                        (o.shape.flat_index_unchecked(idx), scale * scalar_loss_derivative(kind, z))
                    })
                    .collect(),
            },
            Problem::Sensing(m) => {
                let mut g = vec![0.0; m.shape.numel()];
                for (i, &z) in residuals.iter().enumerate() {
                    let c = scale * scalar_loss_derivative(kind, z);
                    if c != 0.0 {
                        m.sensor_axpy(i, c, &mut g);
                    }
                }
                LossGradient::Dense(Tensor::from_raw(m.shape.clone(), g))
            }
        }
    }
}

fn mean_loss(kind: LossKind, residuals: &[f64]) -> f64 {
    residuals.iter().map(|&z| scalar_loss(kind, z)).sum::<f64>() / residuals.len() as f64
}

/// `∇L(W_e)`: sparse over `Ω` for completion, dense for sensing.
#[derive(Debug, Clone, PartialEq)]
pub enum LossGradient {
    Sparse {
        shape: Shape,
        /// `(flat index, value)` in observation order.
        entries: Vec<(usize, f64)>,
    },
    Dense(Tensor),
}

impl LossGradient {
    pub fn to_dense(&self) -> Tensor {
        match self {
            LossGradient::Dense(t) => t.clone(),
            LossGradient::Sparse { shape, entries } => {
                let mut t = Tensor::zeros(shape.clone());
                for &(flat, v) in entries {
                    t.data_mut()[flat] += v;
                }
                t
            }
        }
    }

    pub fn norm(&self) -> f64 {
        match self {
            LossGradient::Dense(t) => t.norm(),
            LossGradient::Sparse { entries, .. } => {
                entries.iter().map(|(_, v)| v * v).sum::<f64>().sqrt()
            }
        }
    }

    /// `⟨∇L, ⊗_n v_n⟩` without materializing the outer product.
    pub fn inner_rank_one<V: AsRef<[f64]>>(&self, vectors: &[V]) -> f64 {
        match self {
            LossGradient::Sparse { shape, entries } => entries
                .iter()
                .map(|&(flat, g)| {
                    let idx = shape.unravel(flat);
                    g * vectors
                        .iter()
                        .zip(&idx)
                        .map(|(v, &i)| v.as_ref()[i])
                        .product::<f64>()
                })
                .sum(),
            LossGradient::Dense(t) => {
                let mut acc = 0.0;
                for_each_index(t.shape(), |flat, idx| {
                    let p: f64 = vectors.iter().zip(idx).map(|(v, &i)| v.as_ref()[i]).product();
                    acc += t.data()[flat] * p;
                });
                acc
            }
        }
    }
}

pub fn completion_loss(f: &CpFactorization, obs: &ObservationSet, kind: LossKind) -> Result<f64> {
    f.shape().expect_same(obs.shape())?;
    Ok(completion_eval(f, obs, kind, None))
}

pub fn sensing_loss(f: &CpFactorization, meas: &MeasurementSet, kind: LossKind) -> Result<f64> {
    f.shape().expect_same(meas.shape())?;
    let w = f.end_tensor();
    let residuals = Problem::Sensing(meas.clone()).residuals(&w)?;
    Ok(mean_loss(kind, &residuals))
}

/// `∇L(W_e)` for the current end tensor.
pub fn loss_gradient_tensor(f: &CpFactorization, problem: &Problem, kind: LossKind) -> Result<LossGradient> {
    f.shape().expect_same(problem.shape())?;
    match problem {
        Problem::Completion(o) => {
            let residuals: Vec<f64> = o.iter().map(|(idx, y)| f.predict_unchecked(idx) - y).collect();
            Ok(problem.gradient_from_residuals(kind, &residuals))
        }
        Problem::Sensing(_) => problem.loss_gradient_at(&f.end_tensor(), kind),
    }
}

/// Loss value together with `∂φ/∂w_r^n` for every component and mode.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loss: f64,
    pub gradient: CpGradient,
}

pub fn objective_gradient(f: &CpFactorization, problem: &Problem, kind: LossKind) -> Result<CpGradient> {
    Ok(evaluate(f, problem, kind)?.gradient)
}

pub fn evaluate(f: &CpFactorization, problem: &Problem, kind: LossKind) -> Result<Evaluation> {
    let mut gradient = CpGradient::zeros_like(f);
    let loss = evaluate_into(f, problem, kind, &mut gradient)?;
    Ok(Evaluation { loss, gradient })
}

/// Like [`evaluate`] but reuses the gradient buffer.
pub fn evaluate_into(
    f: &CpFactorization,
    problem: &Problem,
    kind: LossKind,
    gradient: &mut CpGradient,
) -> Result<f64> {
    f.shape().expect_same(problem.shape())?;
    gradient.clear();
    match problem {
        Problem::Completion(o) => Ok(completion_eval(f, o, kind, Some(gradient))),
        Problem::Sensing(m) => {
            let (loss, g) = m.loss_and_gradient(&f.end_tensor(), kind);
            contract_dense(f, &g, gradient);
            Ok(loss)
        }
    }
}

fn completion_eval(
    f: &CpFactorization,
    obs: &ObservationSet,
    kind: LossKind,
    mut gradient: Option<&mut CpGradient>,
) -> f64 {
    let rank = f.rank();
    let order = f.order();
    let factors = f.factors();
    let scale = 1.0 / obs.len() as f64;
    let mut suffix = vec![0.0; (order + 1) * rank];
    let mut prefix = vec![0.0; rank];
    let mut total = 0.0;
    for (idx, y) in obs.iter() {
        suffix[order * rank..].fill(1.0);
        for n in (0..order).rev() {
            let row = &factors[n][idx[n] * rank..(idx[n] + 1) * rank];
            let (head, tail) = suffix.split_at_mut((n + 1) * rank);
            for ((dst, next), w) in head[n * rank..].iter_mut().zip(&tail[..rank]).zip(row) {
                *dst = next * w;
            }
        }
        let pred: f64 = suffix[..rank].iter().sum();
        let z = pred - y;
        total += scalar_loss(kind, z);
        let Some(grad) = gradient.as_deref_mut() else {
            continue;
        };
        let c = scale * scalar_loss_derivative(kind, z);
        if c == 0.0 {
            continue;
        }
        prefix.fill(c);
        for n in 0..order {
            let base = idx[n] * rank;
            let g_row = &mut grad.factors[n][base..base + rank];
            let rest = &suffix[(n + 1) * rank..(n + 2) * rank];
            for ((g, p), s) in g_row.iter_mut().zip(&prefix).zip(rest) {
                *g += p * s;
            }
            let row = &factors[n][base..base + rank];
            for (p, w) in prefix.iter_mut().zip(row) {
                *p *= w;
            }
        }
    }
    total * scale
}

/// Visits every multi-index of `shape` in row-major order.
pub(crate) fn for_each_index(shape: &Shape, mut visit: impl FnMut(usize, &[usize])) {
    let dims = shape.dims();
    let mut idx = vec![0usize; dims.len()];
    for flat in 0..shape.numel() {
        visit(flat, &idx);
        for k in (0..dims.len()).rev() {
            idx[k] += 1;
            if idx[k] < dims[k] {
                break;
            }
            idx[k] = 0;
        }
    }
}

/// `∂φ/∂w_r^n = ⟦G⟧_n · ⊙_{n'≠n} w_r^{n'}` for a dense `G`, accumulated
/// entry by entry.
/// `∂φ/∂w_r^n` from a dense `∇L` by successive mode contractions: the
/// trailing modes are folded in once and shared by every mode's block.
fn contract_dense(f: &CpFactorization, g: &Tensor, out: &mut CpGradient) {
    let rank = f.rank();
    let order = f.order();
    let dims = g.shape().dims();
    let factors = f.factors();
    // right[k]: ∇L contracted with modes k.., laid out (Π_{j<k} d_j) × R.
    let mut right: Vec<Vec<f64>> = vec![Vec::new(); order];
    for k in (1..order).rev() {
        let d = dims[k];
        let lead: usize = dims[..k].iter().product();
        let mut buf = vec![0.0; lead * rank];
        for (l, dst) in buf.chunks_exact_mut(rank).enumerate() {
            for (i, w) in factors[k].chunks_exact(rank).enumerate() {
                let src = l * d + i;
                if k + 1 == order {
                    let c = g.data()[src];
                    for (o, x) in dst.iter_mut().zip(w) {
                        *o += c * x;
                    }
                } else {
                    let prev = &right[k + 1][src * rank..(src + 1) * rank];
                    for ((o, p), x) in dst.iter_mut().zip(prev).zip(w) {
                        *o += p * x;
                    }
                }
            }
        }
        right[k] = buf;
    }
    // left: products of the leading modes' vectors, (Π_{j<n} d_j) × R.
    let mut left = vec![1.0; rank];
    for n in 0..order {
        let d = dims[n];
        let block = &mut out.factors[n];
        for (l, p) in left.chunks_exact(rank).enumerate() {
            for (i, o) in block.chunks_exact_mut(rank).enumerate() {
                let src = l * d + i;
                if n + 1 == order {
                    let c = g.data()[src];
                    for (o, p) in o.iter_mut().zip(p) {
                        *o += c * p;
                    }
                } else {
                    let r = &right[n + 1][src * rank..(src + 1) * rank];
                    for ((o, p), r) in o.iter_mut().zip(p).zip(r) {
                        *o += p * r;
                    }
                }
            }
        }
        if n + 1 < order {
            let mut next = Vec::with_capacity(left.len() * d);
            for p in left.chunks_exact(rank) {
                for w in factors[n].chunks_exact(rank) {
                    next.extend(p.iter().zip(w).map(|(a, b)| a * b));
                }
            }
            left = next;
        }
    }
}

/// Reference gradient through explicit matricization and Kronecker
/// products. Quadratic in the tensor size; intended for cross-checks.
pub fn cp_gradient_matricized(f: &CpFactorization, loss_gradient: &Tensor) -> Result<CpGradient> {
    f.shape().expect_same(loss_gradient.shape())?;
    let mut out = CpGradient::zeros_like(f);
    let rank = f.rank();
    for n in 0..f.order() {
        let m = matricize(loss_gradient, n)?;
        for r in 0..rank {
            let block = m.matvec(&kron_except(&f.component_vectors(r), n)?)?;
            for (i, v) in block.into_iter().enumerate() {
                out.factors[n][i * rank + r] = v;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cp::{initialize, InitSpec};
    use crate::problems::{generate_ground_truth, sample_measurements, sample_observations, GroundTruthSpec};

    fn shape(d: &[usize]) -> Shape {
        Shape::new(d.to_vec()).unwrap()
    }

    #[test]
    fn scalar_losses() {
        let h = LossKind::Huber { delta: 1.0 };
        assert_eq!(scalar_loss(h, 0.5), 0.125);
        assert_eq!(scalar_loss(h, 2.0), 1.5);
        assert_eq!(scalar_loss(h, -2.0), 1.5);
        assert_eq!(scalar_loss_derivative(h, -3.0), -1.0);
        assert_eq!(scalar_loss_derivative(h, 0.25), 0.25);
        let sq = LossKind::Squared { coeff: 0.5 };
        assert_eq!(scalar_loss(sq, 2.0), 2.0);
        assert_eq!(scalar_loss_derivative(sq, 2.0), 2.0);
        let sq1 = LossKind::Squared { coeff: 1.0 };
        assert_eq!(scalar_loss(sq1, 2.0), 4.0);
        assert!(LossKind::Squared { coeff: 0.3 }.validate().is_err());
        assert!(LossKind::Huber { delta: 0.0 }.validate().is_err());
        assert!(LossKind::ScaledHuber { delta: -1.0 }.validate().is_err());
        let sh = LossKind::ScaledHuber { delta: 0.5 };
        for z in [-3.0, -0.2, 0.0, 0.4, 2.0] {
            let h = LossKind::Huber { delta: 0.5 };
            assert_eq!(scalar_loss(sh, z), scalar_loss(h, z) / 0.5);
            assert_eq!(scalar_loss_derivative(sh, z), scalar_loss_derivative(h, z) / 0.5);
        }
        assert_eq!(scalar_loss_derivative(sh, -3.0), -1.0);
    }

    #[test]
    fn observation_set_validation() {
        let s = shape(&[2, 2]);
        let ok = vec![Observation { index: vec![0, 1], value: 1.0 }];
        assert!(ObservationSet::new(s.clone(), ok).is_ok());
        assert!(ObservationSet::new(s.clone(), vec![]).is_err());
        let dup = vec![
            Observation { index: vec![0, 1], value: 1.0 },
            Observation { index: vec![0, 1], value: 2.0 },
        ];
        assert!(ObservationSet::new(s.clone(), dup).is_err());
        let oob = vec![Observation { index: vec![2, 1], value: 1.0 }];
        assert!(ObservationSet::new(s, oob).is_err());
    }

    #[test]
    fn completion_loss_basics() {
        let s = shape(&[2, 2, 2]);
        let zero = CpFactorization::zeros(s.clone(), 2).unwrap();
        let obs = ObservationSet::new(s.clone(), vec![Observation { index: vec![1, 0, 1], value: 1.0 }]).unwrap();
        assert_eq!(completion_loss(&zero, &obs, LossKind::half_squared()).unwrap(), 0.5);

        let f = initialize(&InitSpec::gaussian(1.0, 1), &s, 2).unwrap();
        let exact = ObservationSet::full(&f.end_tensor());
        assert!(completion_loss(&f, &exact, LossKind::half_squared()).unwrap() < 1e-28);
    }

    #[test]
    fn completion_loss_matches_materialized_oracle() {
        let s = shape(&[3, 4, 2]);
        let gt = generate_ground_truth(&GroundTruthSpec::new(s.clone(), 2, 5)).unwrap();
        let obs = sample_observations(&gt, 10, 6).unwrap();
        let f = initialize(&InitSpec::gaussian(0.5, 7), &s, 3).unwrap();
        let w = f.end_tensor();
        for kind in [LossKind::half_squared(), LossKind::Huber { delta: 0.05 }] {
            let oracle: f64 = obs
                .iter()
                .map(|(idx, y)| scalar_loss(kind, w.get(idx).unwrap() - y))
                .sum::<f64>()
                / obs.len() as f64;
            let got = completion_loss(&f, &obs, kind).unwrap();
            assert!((got - oracle).abs() <= 1e-14 * (1.0 + oracle));
        }
    }

    #[test]
    fn measurement_entries_survive_storage() {
        let s = shape(&[2, 2]);
        let wide = vec![0.1, -0.2, 0.3, 1e-300];
        let narrow = vec![0.5, -0.25, 3.0, 0.0];
        for a in [wide, narrow] {
            let meas = MeasurementSet::from_flat(s.clone(), a.clone(), vec![1.0]).unwrap();
            assert_eq!(meas.sensor(0).as_ref(), &a[..]);
            let back: MeasurementSet = serde_json::from_str(&serde_json::to_string(&meas).unwrap()).unwrap();
            assert_eq!(back, meas);
        }
        let w = Tensor::from_raw(s.clone(), vec![1.0, 1.0, 1.0, 1.0]);
        let meas = MeasurementSet::from_flat(s, vec![0.1, 0.2, 0.3, 0.4], vec![0.0]).unwrap();
        assert!((meas.measure(&w).unwrap()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sensing_loss_cases() {
        let s = shape(&[2, 3, 2]);
        let gt = generate_ground_truth(&GroundTruthSpec::new(s.clone(), 1, 3)).unwrap();
        let meas = sample_measurements(&gt, 6, 4).unwrap();
        let f = initialize(&InitSpec::gaussian(0.5, 2), &s, 2).unwrap();
        let w = f.end_tensor();
        let kind = LossKind::Huber { delta: 0.1 };
        let direct: f64 = (0..meas.len())
            .map(|i| {
                let p: f64 = meas.sensor(i).iter().zip(w.data()).map(|(a, b)| a * b).sum();
                scalar_loss(kind, p - meas.values()[i])
            })
            .sum::<f64>()
            / meas.len() as f64;
        assert!((sensing_loss(&f, &meas, kind).unwrap() - direct).abs() < 1e-14);

        // A = E_{(0,..,0)} reduces to completion on one entry.
        let mut e0 = Tensor::zeros(s.clone());
        e0.data_mut()[0] = 1.0;
        let single = MeasurementSet::new(vec![e0], vec![0.7]).unwrap();
        let obs = ObservationSet::new(s.clone(), vec![Observation { index: vec![0, 0, 0], value: 0.7 }]).unwrap();
        let a = sensing_loss(&f, &single, kind).unwrap();
        let b = completion_loss(&f, &obs, kind).unwrap();
        assert!((a - b).abs() < 1e-15);

        let exact = CpFactorization::zeros(s.clone(), 1).unwrap();
        let zero_meas = MeasurementSet::new(vec![Tensor::zeros(s.clone())], vec![0.0]).unwrap();
        assert_eq!(sensing_loss(&exact, &zero_meas, kind).unwrap(), 0.0);
        let other = CpFactorization::zeros(shape(&[2, 2]), 1).unwrap();
        assert!(sensing_loss(&other, &meas, kind).is_err());
    }

    #[test]
    fn huber_gradient_constant_near_origin() {
        let s = shape(&[3, 3, 3]);
        let gt = Tensor::from_fn(s.clone(), |idx| 1.0 + 0.1 * idx[0] as f64);
        let obs = sample_observations(&gt, 12, 1).unwrap();
        let problem = Problem::Completion(obs.clone());
        let delta = 0.2;
        let kind = LossKind::Huber { delta };
        let f = initialize(&InitSpec::gaussian(0.05, 3), &s, 2).unwrap();
        assert!(f.end_tensor().norm() < obs.min_abs_value() - delta);
        let g = loss_gradient_tensor(&f, &problem, kind).unwrap();
        let g0 = problem.loss_gradient_at(&Tensor::zeros(s), kind).unwrap();
        assert_eq!(g, g0);
        if let LossGradient::Sparse { entries, .. } = g {
            assert!(entries.iter().all(|&(_, v)| v == -delta / 12.0));
        }
    }

    #[test]
    fn zero_residual_and_zero_component_gradients() {
        let s = shape(&[2, 3, 2]);
        let f = initialize(&InitSpec::gaussian(1.0, 9), &s, 2).unwrap();
        let problem = Problem::Completion(ObservationSet::full(&f.end_tensor()));
        let g = loss_gradient_tensor(&f, &problem, LossKind::half_squared()).unwrap();
        assert!(g.to_dense().data().iter().all(|&x| x.abs() < 1e-15));

        let mut weights = f.weights();
        weights[1] = vec![vec![0.0; 2], vec![0.0; 3], vec![0.0; 2]];
        let f = CpFactorization::from_weights(s.clone(), weights).unwrap();
        let gt = generate_ground_truth(&GroundTruthSpec::new(s, 1, 1)).unwrap();
        let grad = objective_gradient(&f, &Problem::Completion(ObservationSet::full(&gt)), LossKind::half_squared()).unwrap();
        for n in 0..3 {
            assert!(grad.block(1, n).iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn sparse_gradient_matches_matricized_oracle() {
        for dims in [&[4, 5][..], &[3, 4, 2], &[2, 3, 2, 3]] {
            let s = shape(dims);
            let gt = generate_ground_truth(&GroundTruthSpec::new(s.clone(), 2, 8)).unwrap();
            let f = initialize(&InitSpec::gaussian(0.6, 4), &s, 3).unwrap();
            let problems = [
                Problem::Completion(sample_observations(&gt, s.numel() / 2, 2).unwrap()),
                Problem::Sensing(sample_measurements(&gt, 7, 3).unwrap()),
            ];
            for problem in &problems {
                for kind in [LossKind::half_squared(), LossKind::Huber { delta: 0.05 }] {
                    let fast = objective_gradient(&f, problem, kind).unwrap();
                    let g = loss_gradient_tensor(&f, problem, kind).unwrap().to_dense();
                    let slow = cp_gradient_matricized(&f, &g).unwrap();
                    for (a, b) in fast.factors.iter().flatten().zip(slow.factors.iter().flatten()) {
                        assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
                    }
                }
            }
        }
    }

    #[test]
    fn loss_gradient_matches_entrywise_finite_differences() {
        let s = shape(&[3, 3, 4]);
        let gt = generate_ground_truth(&GroundTruthSpec::new(s.clone(), 2, 21)).unwrap();
        let problem = Problem::Completion(sample_observations(&gt, 20, 5).unwrap());
        let f = initialize(&InitSpec::gaussian(0.7, 6), &s, 2).unwrap();
        let kind = LossKind::half_squared();
        let w = f.end_tensor();
        let g = loss_gradient_tensor(&f, &problem, kind).unwrap().to_dense();
        let h = 1e-6;
        for flat in 0..s.numel() {
            let mut plus = w.clone();
            plus.data_mut()[flat] += h;
            let mut minus = w.clone();
            minus.data_mut()[flat] -= h;
            let fd = (problem.tensor_loss(&plus, kind).unwrap() - problem.tensor_loss(&minus, kind).unwrap()) / (2.0 * h);
            let scale = g.data().iter().fold(0.0f64, |m, x| m.max(x.abs()));
            assert!((fd - g.data()[flat]).abs() <= 1e-6 * scale, "entry {flat}");
        }
    }

    #[test]
    fn huber_gradient_is_one_lipschitz() {
        use rand::{Rng, SeedableRng};
        let s = shape(&[3, 3, 3]);
        let gt = generate_ground_truth(&GroundTruthSpec::new(s.clone(), 2, 2)).unwrap();
        let problem = Problem::Completion(sample_observations(&gt, 15, 3).unwrap());
        let kind = LossKind::Huber { delta: 0.03 };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let scale = rng.gen_range(0.01..1.0);
            let a = Tensor::from_fn(s.clone(), |_| rng.gen_range(-scale..scale));
            let b = Tensor::from_fn(s.clone(), |_| rng.gen_range(-scale..scale));
            let ga = problem.loss_gradient_at(&a, kind).unwrap().to_dense();
            let gb = problem.loss_gradient_at(&b, kind).unwrap().to_dense();
            assert!(ga.sub(&gb).unwrap().norm() <= a.sub(&b).unwrap().norm() + 1e-15);
        }
    }

    #[test]
    fn json_roundtrip_of_problem_sets() {
        let s = shape(&[2, 2, 3]);
        let gt = generate_ground_truth(&GroundTruthSpec::new(s.clone(), 1, 2)).unwrap();
        let obs = sample_observations(&gt, 5, 1).unwrap();
        let back: ObservationSet = serde_json::from_str(&serde_json::to_string(&obs).unwrap()).unwrap();
        assert_eq!(back, obs);
        let meas = sample_measurements(&gt, 3, 1).unwrap();
        let back: MeasurementSet = serde_json::from_str(&serde_json::to_string(&meas).unwrap()).unwrap();
        assert_eq!(back, meas);
    }
}
