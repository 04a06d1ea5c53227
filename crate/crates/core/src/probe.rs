//! Tensor rank as a complexity measure for image classification: binary
//! one-vs-all tasks over binarized 28×28 images are fit by an implicit CP
//! predictor of order 784 with dimension two per mode, next to a ridge
//! baseline.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{adam_train, AdamConfig};
use crate::rng::{self, Stream};

const IMAGE_MAGIC: u32 = 2051;
const LABEL_MAGIC: u32 = 2049;

/// Images and labels as stored in an IDX pair.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub rows: usize,
    pub cols: usize,
    /// `count × rows·cols` grayscale pixels.
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl RawDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let d = self.rows * self.cols;
        &self.pixels[i * d..(i + 1) * d]
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, detail: impl Into<String>) -> Error {
        Error::Idx {
            path: self.path.to_path_buf(),
            offset: self.offset as u64,
            detail: detail.into(),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.offset < n {
            return Err(self.err(format!(
                "truncated: need {n} bytes, {} remain",
                self.bytes.len() - self.offset
            )));
        }
        let out = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(out)
    }
}

/// Parses an IDX image file body: magic 2051, count, rows, cols, pixels.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut r = Reader { bytes, offset: 0, path };
    let magic = r.u32()?;
    if magic != IMAGE_MAGIC {
        r.offset = 0;
        return Err(r.err(format!("bad magic {magic}, expected {IMAGE_MAGIC}")));
    }
    let count = r.u32()? as usize;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let n = count
        .checked_mul(rows)
        .and_then(|x| x.checked_mul(cols))
        .ok_or_else(|| r.err("image dimensions overflow"))?;
    let pixels = r.take(n)?.to_vec();
    Ok((rows, cols, pixels))
}

/// Parses an IDX label file body: magic 2049, count, labels in 0–9.
pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let mut r = Reader { bytes, offset: 0, path };
    let magic = r.u32()?;
    if magic != LABEL_MAGIC {
        r.offset = 0;
        return Err(r.err(format!("bad magic {magic}, expected {LABEL_MAGIC}")));
    }
    let count = r.u32()? as usize;
    let start = r.offset;
    let labels = r.take(count)?.to_vec();
    if let Some(pos) = labels.iter().position(|&l| l > 9) {
        r.offset = start + pos;
        return Err(r.err(format!("label {} outside 0-9", labels[pos])));
    }
    Ok(labels)
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<RawDataset> {
    let read = |p: &Path| {
        std::fs::read(p).map_err(|e| Error::Idx {
            path: p.to_path_buf(),
            offset: 0,
            detail: e.to_string(),
        })
    };
    let (rows, cols, pixels) = parse_idx_images(&read(images_path)?, images_path)?;
    let labels = parse_idx_labels(&read(labels_path)?, labels_path)?;
    let count = pixels.len() / (rows * cols).max(1);
    if count != labels.len() {
        return Err(Error::Idx {
            path: labels_path.to_path_buf(),
            offset: 4,
            detail: format!("{} labels for {count} images", labels.len()),
        });
    }
    Ok(RawDataset {
        rows,
        cols,
        pixels,
        labels,
    })
}

/// IDX encodings, for fixtures and round trips.
pub fn encode_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let count = pixels.len() / (rows * cols).max(1);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGE_MAGIC, count as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Images with pixels in {0, 1}.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryDataset {
    pub dim: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl BinaryDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.pixels[i * self.dim..(i + 1) * self.dim]
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut pixels = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        Self {
            dim: self.dim,
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Rounds `pixel / 255` to the nearest integer: 1 iff `pixel ≥ 128`.
pub fn binarize_pixel(p: u8) -> u8 {
    u8::from(p >= 128)
}

pub fn binarize(raw: &RawDataset) -> BinaryDataset {
    BinaryDataset {
        dim: raw.rows * raw.cols,
        pixels: raw.pixels.iter().map(|&p| binarize_pixel(p)).collect(),
        labels: raw.labels.clone(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Original,
    RandImage,
    RandLabel,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Original, Variant::RandImage, Variant::RandLabel];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Original => "original",
            Variant::RandImage => "rand_image",
            Variant::RandLabel => "rand_label",
        }
    }

    fn index(self) -> u64 {
        self as u64
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(format!("unknown variant '{s}'")))
    }
}

/// Applies a variant to one split. `split` separates the random draws of
/// the train (0) and test (1) splits.
pub fn make_variant(data: &BinaryDataset, variant: Variant, seed: u64, split: u64) -> BinaryDataset {
    let mut rng = rng::stream_with_index(seed, Stream::Variant, variant.index() * 16 + split);
    match variant {
        Variant::Original => data.clone(),
        Variant::RandImage => BinaryDataset {
            dim: data.dim,
            pixels: (0..data.pixels.len()).map(|_| u8::from(rng.gen_bool(0.5))).collect(),
            labels: data.labels.clone(),
        },
        Variant::RandLabel => {
            let mut labels = data.labels.clone();
            labels.shuffle(&mut rng);
            BinaryDataset {
                dim: data.dim,
                pixels: data.pixels.clone(),
                labels,
            }
        }
    }
}

/// A one-vs-all task: label 1 for `digit`, 0 otherwise.
#[derive(Debug, Clone)]
pub struct ProbeTask {
    pub variant: Variant,
    pub digit: u8,
    pub train: Arc<BinaryDataset>,
    pub test: Arc<BinaryDataset>,
}

impl ProbeTask {
    fn targets(data: &BinaryDataset, digit: u8) -> Vec<f64> {
        data.labels.iter().map(|&l| f64::from(u8::from(l == digit))).collect()
    }

    pub fn train_targets(&self) -> Vec<f64> {
        Self::targets(&self.train, self.digit)
    }

    pub fn test_targets(&self) -> Vec<f64> {
        Self::targets(&self.test, self.digit)
    }
}

/// Implicit CP predictor over `{0,1}^dim` inputs: entry `x` of a tensor
/// with `dim` modes of dimension two, `f(x) = Σ_r Π_n w[n][x_n][r]`. The
/// tensor itself is never materialized.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    dim: usize,
    rank: usize,
    /// Layout `[n][i][r]`.
    params: Vec<f64>,
}

impl ProbeModel {
    pub fn new(dim: usize, rank: usize, params: Vec<f64>) -> Result<Self> {
        if dim == 0 || rank == 0 {
            return Err(Error::config("probe model needs positive dim and rank"));
        }
        if params.len() != dim * 2 * rank {
            return Err(Error::InvalidShape(format!(
                "expected {} parameters, got {}",
                dim * 2 * rank,
                params.len()
            )));
        }
        Ok(Self { dim, rank, params })
    }

    /// Entries i.i.d. `N(mean, std²)`.
    pub fn random(dim: usize, rank: usize, mean: f64, std: f64, seed: u64) -> Result<Self> {
        let normal = Normal::new(mean, std).map_err(|e| Error::config(e.to_string()))?;
        let mut rng = rng::stream(seed, Stream::Init);
        let params = (0..dim * 2 * rank).map(|_| normal.sample(&mut rng)).collect();
        Self::new(dim, rank, params)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn predict(&self, x: &[u8]) -> f64 {
        predict_with(&self.params, self.dim, self.rank, x)
    }
}

fn predict_with(params: &[f64], dim: usize, rank: usize, x: &[u8]) -> f64 {
    let mut prod = vec![1.0; rank];
    for (n, &xi) in x.iter().enumerate().take(dim) {
        let base = (n * 2 + xi as usize) * rank;
        for (p, w) in prod.iter_mut().zip(&params[base..base + rank]) {
            *p *= w;
        }
    }
    prod.iter().sum()
}

/// Mean squared error over `batch` against `targets`, with its gradient
/// added into `grad`. Uses prefix and suffix products per sample.
fn batch_loss_grad(
    params: &[f64],
    dim: usize,
    rank: usize,
    data: &BinaryDataset,
    targets: &[f64],
    batch: &[usize],
    grad: &mut [f64],
    prefix: &mut Vec<f64>,
) -> f64 {
    prefix.resize((dim + 1) * rank, 0.0);
    let mut suffix = vec![0.0; rank];
    let scale = 2.0 / batch.len() as f64;
    let mut loss = 0.0;
    for &s in batch {
        let x = data.image(s);
        prefix[..rank].fill(1.0);
        for n in 0..dim {
            let base = (n * 2 + x[n] as usize) * rank;
            for r in 0..rank {
                prefix[(n + 1) * rank + r] = prefix[n * rank + r] * params[base + r];
            }
        }
        let pred: f64 = prefix[dim * rank..].iter().sum();
        let res = pred - targets[s];
        loss += res * res;
        let c = scale * res;
        suffix.fill(c);
        for n in (0..dim).rev() {
            let base = (n * 2 + x[n] as usize) * rank;
            for r in 0..rank {
                grad[base + r] += prefix[n * rank + r] * suffix[r];
                suffix[r] *= params[base + r];
            }
        }
    }
    loss / batch.len() as f64
}

/// Scale applied to 0/1 labels during training; predictions are divided by
/// it for evaluation.
pub const LABEL_SCALE: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub train_mse: f64,
    pub test_mse_clipped: f64,
    pub iters: u64,
    pub final_batch_loss: f64,
    pub converged: bool,
}

/// Squared errors clipped at one, averaged.
pub fn clipped_mse(pred: &[f64], targets: &[f64]) -> f64 {
    let n = pred.len().max(1) as f64;
    pred.iter()
        .zip(targets)
        .map(|(p, t)| ((p - t) * (p - t)).min(1.0))
        .sum::<f64>()
        / n
}

pub fn mse(pred: &[f64], targets: &[f64]) -> f64 {
    let n = pred.len().max(1) as f64;
    pred.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n
}

/// Fits a rank-`k` predictor with Adam on `LABEL_SCALE · labels`, starting
/// from weights `N(1, 1e-3²)`.
pub fn fit_rank_k(task: &ProbeTask, k: usize, adam: &AdamConfig, init_seed: u64) -> Result<(ProbeModel, FitResult)> {
    let dim = task.train.dim;
    let mut model = ProbeModel::random(dim, k, 1.0, 1e-3, init_seed)?;
    let train_y = task.train_targets();
    let scaled: Vec<f64> = train_y.iter().map(|y| LABEL_SCALE * y).collect();
    let mut prefix = Vec::new();
    let data = task.train.clone();
    let outcome = adam_train(&mut model.params, data.len(), adam, |p, batch, g| {
        Ok(batch_loss_grad(p, dim, k, &data, &scaled, batch, g, &mut prefix))
    })?;

    let predict_all = |d: &BinaryDataset| -> Result<Vec<f64>> {
        let out: Vec<f64> = (0..d.len()).map(|i| model.predict(d.image(i)) / LABEL_SCALE).collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("probe prediction"));
        }
        Ok(out)
    };
    let train_pred = predict_all(&task.train)?;
    let test_pred = predict_all(&task.test)?;
    let result = FitResult {
        train_mse: mse(&train_pred, &train_y),
        test_mse_clipped: clipped_mse(&test_pred, &task.test_targets()),
        iters: outcome.iters,
        final_batch_loss: outcome.final_batch_loss,
        converged: outcome.converged,
    };
    Ok((model, result))
}

/// Normal equations shared by every digit of one variant: centered Gram
/// matrix of the training inputs and their means.
pub struct RidgeSystem {
    dim: usize,
    n: usize,
    mean: Vec<f64>,
    gram: DMatrix<f64>,
}

impl RidgeSystem {
    pub fn new(data: &BinaryDataset) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Empty("ridge training set"));
        }
        let d = data.dim;
        // Accumulate XᵀX over the ones of each binary row.
        let mut gram = vec![0.0f64; d * d];
        let mut counts = vec![0.0f64; d];
        let mut ones = Vec::with_capacity(d);
        for i in 0..data.len() {
            ones.clear();
            ones.extend(data.image(i).iter().enumerate().filter(|(_, &v)| v != 0).map(|(j, _)| j));
            for &a in &ones {
                counts[a] += 1.0;
                let row = &mut gram[a * d..(a + 1) * d];
                for &b in &ones {
                    row[b] += 1.0;
                }
            }
        }
        let n = data.len() as f64;
        let mean: Vec<f64> = counts.iter().map(|c| c / n).collect();
        let mut g = DMatrix::from_row_slice(d, d, &gram);
        for a in 0..d {
            for b in 0..d {
                g[(a, b)] -= n * mean[a] * mean[b];
            }
        }
        Ok(Self {
            dim: d,
            n: data.len(),
            mean,
            gram: g,
        })
    }

    /// Weights and intercept for targets `y` with penalty `alpha` on the
    /// weights only.
    pub fn solve(&self, data: &BinaryDataset, y: &[f64], alpha: f64) -> Result<(Vec<f64>, f64)> {
        if y.len() != self.n || data.len() != self.n {
            return Err(Error::ShapeMismatch {
                expected: vec![self.n],
                actual: vec![y.len()],
            });
        }
        if !(alpha > 0.0) {
            return Err(Error::config("ridge penalty must be positive"));
        }
        let y_mean = y.iter().sum::<f64>() / self.n as f64;
        let mut rhs = vec![0.0; self.dim];
        for (i, &yi) in y.iter().enumerate() {
            if yi != 0.0 {
                for (j, &v) in data.image(i).iter().enumerate() {
                    if v != 0 {
                        rhs[j] += yi;
                    }
                }
            }
        }
        let n = self.n as f64;
        let rhs = DVector::from_iterator(self.dim, rhs.iter().zip(&self.mean).map(|(r, m)| r - n * m * y_mean));
        let mut a = self.gram.clone();
        for j in 0..self.dim {
            a[(j, j)] += alpha;
        }
        let chol = a
            .cholesky()
            .ok_or_else(|| Error::config("ridge system is not positive definite"))?;
        let w = chol.solve(&rhs);
        let intercept = y_mean - w.iter().zip(&self.mean).map(|(w, m)| w * m).sum::<f64>();
        Ok((w.iter().copied().collect(), intercept))
    }
}

fn linear_predict(data: &BinaryDataset, w: &[f64], b: f64) -> Vec<f64> {
    (0..data.len())
        .map(|i| b + data.image(i).iter().zip(w).filter(|(&x, _)| x != 0).map(|(_, w)| w).sum::<f64>())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeResult {
    pub train_mse: f64,
    pub test_mse_clipped: f64,
}

pub fn ridge_baseline(task: &ProbeTask, system: &RidgeSystem, alpha: f64) -> Result<RidgeResult> {
    let y = task.train_targets();
    let (w, b) = system.solve(&task.train, &y, alpha)?;
    Ok(RidgeResult {
        train_mse: mse(&linear_predict(&task.train, &w, b), &y),
        test_mse_clipped: clipped_mse(&linear_predict(&task.test, &w, b), &task.test_targets()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    #[serde(default = "default_variants")]
    pub variants: Vec<Variant>,
    #[serde(default = "default_digits")]
    pub digits: Vec<u8>,
    #[serde(default = "default_ranks")]
    pub ranks: Vec<usize>,
    /// Random subset of the training split, drawn once per run.
    #[serde(default)]
    pub subsample: Option<usize>,
    #[serde(default = "default_ridge_alpha")]
    pub ridge_alpha: f64,
    #[serde(default = "default_true")]
    pub ridge: bool,
    #[serde(default = "default_true")]
    pub fit: bool,
    pub adam: AdamConfig,
    pub seed: u64,
}

fn default_variants() -> Vec<Variant> {
    Variant::ALL.to_vec()
}
fn default_digits() -> Vec<u8> {
    (0..10).collect()
}
fn default_ranks() -> Vec<usize> {
    (1..=15).collect()
}
fn default_ridge_alpha() -> f64 {
    0.5
}
fn default_true() -> bool {
    true
}

impl ProbeConfig {
    pub fn new(dir: &Path, seed: u64) -> Self {
        Self {
            train_images: dir.join("train-images-idx3-ubyte"),
            train_labels: dir.join("train-labels-idx1-ubyte"),
            test_images: dir.join("t10k-images-idx3-ubyte"),
            test_labels: dir.join("t10k-labels-idx1-ubyte"),
            variants: default_variants(),
            digits: default_digits(),
            ranks: default_ranks(),
            subsample: None,
            ridge_alpha: default_ridge_alpha(),
            ridge: true,
            fit: true,
            adam: AdamConfig::with_seed(seed),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.digits.iter().any(|&d| d > 9) {
            return Err(Error::config("digits must lie in 0-9"));
        }
        if self.ranks.contains(&0) {
            return Err(Error::config("ranks must be positive"));
        }
        if self.subsample == Some(0) {
            return Err(Error::config("subsample must be positive"));
        }
        self.adam.validate()
    }

    pub fn files_present(&self) -> bool {
        [&self.train_images, &self.train_labels, &self.test_images, &self.test_labels]
            .iter()
            .all(|p| p.is_file())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub variant: Variant,
    pub digit: u8,
    pub k: usize,
    pub train_mse: f64,
    pub test_mse_clipped: f64,
    pub iters: u64,
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeRow {
    pub variant: Variant,
    pub digit: u8,
    pub train_mse: f64,
    pub test_mse_clipped: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: Variant,
    /// Rank, or 0 for the ridge baseline.
    pub k: usize,
    pub train_mean: f64,
    pub train_std: f64,
    pub test_mean: f64,
    pub test_std: f64,
    pub tasks: usize,
}

#[derive(Debug, Clone, Default)]
pub struct ProbeResults {
    pub fits: Vec<ProbeRow>,
    pub ridge: Vec<RidgeRow>,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl ProbeResults {
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut out = Vec::new();
        for variant in Variant::ALL {
            let ridge: Vec<&RidgeRow> = self.ridge.iter().filter(|r| r.variant == variant).collect();
            if !ridge.is_empty() {
                let (tm, ts) = mean_std(&ridge.iter().map(|r| r.train_mse).collect::<Vec<_>>());
                let (em, es) = mean_std(&ridge.iter().map(|r| r.test_mse_clipped).collect::<Vec<_>>());
                out.push(SummaryRow {
                    variant,
                    k: 0,
                    train_mean: tm,
                    train_std: ts,
                    test_mean: em,
                    test_std: es,
                    tasks: ridge.len(),
                });
            }
            let mut ks: Vec<usize> = self.fits.iter().filter(|r| r.variant == variant).map(|r| r.k).collect();
            ks.sort_unstable();
            ks.dedup();
            for k in ks {
                let rows: Vec<&ProbeRow> = self.fits.iter().filter(|r| r.variant == variant && r.k == k).collect();
                let (tm, ts) = mean_std(&rows.iter().map(|r| r.train_mse).collect::<Vec<_>>());
                let (em, es) = mean_std(&rows.iter().map(|r| r.test_mse_clipped).collect::<Vec<_>>());
                out.push(SummaryRow {
                    variant,
                    k,
                    train_mean: tm,
                    train_std: ts,
                    test_mean: em,
                    test_std: es,
                    tasks: rows.len(),
                });
            }
        }
        out
    }

    /// Writes `results.csv` (deterministic columns), `timings.csv`
    /// (wall-clock seconds per fit), `ridge.csv` and `summary.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(dir.join("results.csv"))?;
        w.write_record(["variant", "digit", "k", "train_mse", "test_mse_clipped", "iters"])?;
        for r in &self.fits {
            w.write_record([
                r.variant.name().to_string(),
                r.digit.to_string(),
                r.k.to_string(),
                r.train_mse.to_string(),
                r.test_mse_clipped.to_string(),
                r.iters.to_string(),
            ])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("timings.csv"))?;
        w.write_record(["variant", "digit", "k", "wall_time"])?;
        for r in &self.fits {
            w.write_record([
                r.variant.name().to_string(),
                r.digit.to_string(),
                r.k.to_string(),
                format!("{:.3}", r.wall_time),
            ])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("ridge.csv"))?;
        w.write_record(["variant", "digit", "train_mse", "test_mse_clipped"])?;
        for r in &self.ridge {
            w.write_record([
                r.variant.name().to_string(),
                r.digit.to_string(),
                r.train_mse.to_string(),
                r.test_mse_clipped.to_string(),
            ])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
        w.write_record(["variant", "k", "train_mean", "train_std", "test_mean", "test_std", "tasks"])?;
        for r in self.summary() {
            w.write_record([
                r.variant.name().to_string(),
                r.k.to_string(),
                r.train_mean.to_string(),
                r.train_std.to_string(),
                r.test_mean.to_string(),
                r.test_std.to_string(),
                r.tasks.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Loads, binarizes and derives the variant splits, applying `subsample`
/// to the training split after the variant is drawn.
pub fn prepare_splits(
    train: &BinaryDataset,
    test: &BinaryDataset,
    variant: Variant,
    subsample: Option<usize>,
    seed: u64,
) -> Result<(Arc<BinaryDataset>, Arc<BinaryDataset>)> {
    let mut tr = make_variant(train, variant, seed, 0);
    let te = make_variant(test, variant, seed, 1);
    if let Some(m) = subsample {
        if m < tr.len() {
            let mut rng = rng::stream(seed, Stream::Subsample);
            let mut idx = rand::seq::index::sample(&mut rng, tr.len(), m).into_vec();
            idx.sort_unstable();
            tr = tr.subset(&idx);
        }
    }
    Ok((Arc::new(tr), Arc::new(te)))
}

/// Runs ridge baselines and rank-k fits over the configured grid on
/// already-loaded splits. Fits run in parallel on the rayon pool; results
/// are returned in grid order.
pub fn run_probe_on(config: &ProbeConfig, train: &BinaryDataset, test: &BinaryDataset) -> Result<ProbeResults> {
    config.validate()?;
    if train.dim != test.dim {
        return Err(Error::ShapeMismatch {
            expected: vec![train.dim],
            actual: vec![test.dim],
        });
    }
    let mut results = ProbeResults::default();
    let mut jobs = Vec::new();
    for &variant in &config.variants {
        let (tr, te) = prepare_splits(train, test, variant, config.subsample, config.seed)?;
        if config.ridge {
            let system = RidgeSystem::new(&tr)?;
            for &digit in &config.digits {
                let task = ProbeTask {
                    variant,
                    digit,
                    train: tr.clone(),
                    test: te.clone(),
                };
                let r = ridge_baseline(&task, &system, config.ridge_alpha)?;
                results.ridge.push(RidgeRow {
                    variant,
                    digit,
                    train_mse: r.train_mse,
                    test_mse_clipped: r.test_mse_clipped,
                });
            }
        }
        if config.fit {
            for &k in &config.ranks {
                for &digit in &config.digits {
                    jobs.push((
                        ProbeTask {
                            variant,
                            digit,
                            train: tr.clone(),
                            test: te.clone(),
                        },
                        k,
                    ));
                }
            }
        }
    }
    results.fits = jobs
        .into_par_iter()
        .map(|(task, k)| {
            let job = (task.variant.index() << 16) | ((k as u64) << 4) | u64::from(task.digit);
            let mut seeds = rng::stream_with_index(config.seed, Stream::Init, job);
            let adam = AdamConfig {
                seed: seeds.gen(),
                ..config.adam.clone()
            };
            let init_seed: u64 = seeds.gen();
            let start = Instant::now();
            let (_, fit) = fit_rank_k(&task, k, &adam, init_seed)?;
            Ok(ProbeRow {
                variant: task.variant,
                digit: task.digit,
                k,
                train_mse: fit.train_mse,
                test_mse_clipped: fit.test_mse_clipped,
                iters: fit.iters,
                wall_time: start.elapsed().as_secs_f64(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(results)
}

pub fn run_probe(config: &ProbeConfig) -> Result<ProbeResults> {
    let train = binarize(&load_idx(&config.train_images, &config.train_labels)?);
    let test = binarize(&load_idx(&config.test_images, &config.test_labels)?);
    run_probe_on(config, &train, &test)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize, dim: usize, seed: u64) -> BinaryDataset {
        let mut rng = rng::stream(seed, Stream::GroundTruth);
        BinaryDataset {
            dim,
            pixels: (0..n * dim).map(|_| u8::from(rng.gen_bool(0.3))).collect(),
            labels: (0..n).map(|_| rng.gen_range(0..10)).collect(),
        }
    }

    #[test]
    fn idx_roundtrip_and_errors() {
        let p = Path::new("mem");
        let pixels: Vec<u8> = (0..2 * 6).map(|i| (i * 20) as u8).collect();
        let bytes = encode_idx_images(2, 3, &pixels);
        assert_eq!(parse_idx_images(&bytes, p).unwrap(), (2, 3, pixels.clone()));
        let labels = encode_idx_labels(&[3, 9]);
        assert_eq!(parse_idx_labels(&labels, p).unwrap(), vec![3, 9]);

        match parse_idx_images(&bytes[..bytes.len() - 5], p) {
            Err(Error::Idx { offset, .. }) => assert_eq!(offset, 16),
            other => panic!("{other:?}"),
        }
        match parse_idx_images(&bytes[..10], p) {
            Err(Error::Idx { offset, .. }) => assert_eq!(offset, 8),
            other => panic!("{other:?}"),
        }
        assert!(parse_idx_images(&labels, p).is_err());
        assert!(parse_idx_labels(&bytes, p).is_err());
        match parse_idx_labels(&encode_idx_labels(&[1, 12]), p) {
            Err(Error::Idx { offset, .. }) => assert_eq!(offset, 9),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn load_checks_counts() {
        let dir = tempfile::tempdir().unwrap();
        let im = dir.path().join("im");
        let lb = dir.path().join("lb");
        std::fs::write(&im, encode_idx_images(2, 2, &[0; 12])).unwrap();
        std::fs::write(&lb, encode_idx_labels(&[1, 2])).unwrap();
        assert!(matches!(load_idx(&im, &lb), Err(Error::Idx { .. })));
        std::fs::write(&lb, encode_idx_labels(&[1, 2, 3])).unwrap();
        let raw = load_idx(&im, &lb).unwrap();
        assert_eq!(raw.len(), 3);
        assert!(load_idx(&dir.path().join("missing"), &lb).is_err());
    }

    #[test]
    fn binarize_threshold() {
        assert_eq!(binarize_pixel(200), 1);
        assert_eq!(binarize_pixel(50), 0);
        assert_eq!(binarize_pixel(127), 0);
        assert_eq!(binarize_pixel(128), 1);
        let raw = RawDataset {
            rows: 1,
            cols: 4,
            pixels: vec![0, 255, 255, 0],
            labels: vec![0],
        };
        let b = binarize(&raw);
        assert_eq!(b.pixels, vec![0, 1, 1, 0]);
    }

    #[test]
    fn variants_behave() {
        let d = toy(2000, 50, 1);
        assert_eq!(make_variant(&d, Variant::Original, 3, 0), d);
        let rl = make_variant(&d, Variant::RandLabel, 3, 0);
        let mut a = rl.labels.clone();
        let mut b = d.labels.clone();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
        assert_ne!(rl.labels, d.labels);
        assert_eq!(rl.pixels, d.pixels);
        assert_ne!(make_variant(&d, Variant::RandLabel, 3, 1).labels, rl.labels);
        let ri = make_variant(&d, Variant::RandImage, 3, 0);
        let mean = ri.pixels.iter().map(|&p| f64::from(p)).sum::<f64>() / ri.pixels.len() as f64;
        assert!((mean - 0.5).abs() < 0.01, "{mean}");
        assert_eq!(ri.labels, d.labels);
    }

    #[test]
    fn probe_gradient_matches_finite_differences() {
        let d = toy(7, 6, 2);
        let targets: Vec<f64> = (0..7).map(|i| (i % 2) as f64 * 2.0).collect();
        let model = ProbeModel::random(6, 3, 1.0, 0.3, 5).unwrap();
        let batch: Vec<usize> = (0..7).collect();
        let mut grad = vec![0.0; model.params.len()];
        let mut prefix = Vec::new();
        let loss = batch_loss_grad(&model.params, 6, 3, &d, &targets, &batch, &mut grad, &mut prefix);
        // Loss oracle computed through the plain predictor.
        let oracle = |p: &[f64]| -> f64 {
            batch
                .iter()
                .map(|&s| {
                    let r = predict_with(p, 6, 3, d.image(s)) - targets[s];
                    r * r
                })
                .sum::<f64>()
                / 7.0
        };
        assert!((loss - oracle(&model.params)).abs() < 1e-12);
        let h = 1e-6;
        for j in 0..model.params.len() {
            let mut p = model.params.clone();
            p[j] += h;
            let up = oracle(&p);
            p[j] -= 2.0 * h;
            let down = oracle(&p);
            let fd = (up - down) / (2.0 * h);
            assert!((fd - grad[j]).abs() <= 1e-6 * (1.0 + fd.abs()), "{j}: {fd} vs {}", grad[j]);
        }
    }

    #[test]
    fn wide_model_predictions_stay_finite() {
        let m = ProbeModel::random(784, 2, 1.0, 1e-3, 1).unwrap();
        let x = vec![1u8; 784];
        let p = m.predict(&x);
        assert!(p.is_finite() && (p - 2.0).abs() < 0.2);
    }

    #[test]
    fn zero_labels_fit_to_zero() {
        let d = Arc::new(BinaryDataset {
            dim: 8,
            pixels: toy(40, 8, 3).pixels,
            labels: vec![5; 40],
        });
        let task = ProbeTask {
            variant: Variant::Original,
            digit: 0,
            train: d.clone(),
            test: d,
        };
        let cfg = AdamConfig {
            lr: 1e-2,
            batch_size: 40,
            max_iters: 3000,
            ..AdamConfig::with_seed(1)
        };
        let (_, fit) = fit_rank_k(&task, 1, &cfg, 2).unwrap();
        assert!(fit.train_mse < 1e-4, "{fit:?}");
        assert!(fit.test_mse_clipped < 1e-4);
        let sys = RidgeSystem::new(&task.train).unwrap();
        let r = ridge_baseline(&task, &sys, 0.5).unwrap();
        assert!(r.train_mse < 1e-24 && r.test_mse_clipped < 1e-24);
    }

    #[test]
    fn single_pixel_task_is_rank_one() {
        // Label 1 exactly when pixel 2 is on: f(x) = x_2 is a rank-one entry.
        let mut d = toy(300, 10, 4);
        for i in 0..d.len() {
            d.labels[i] = if d.pixels[i * 10 + 2] == 1 { 7 } else { 0 };
        }
        let d = Arc::new(d);
        let task = ProbeTask {
            variant: Variant::Original,
            digit: 7,
            train: d.clone(),
            test: d,
        };
        let cfg = AdamConfig {
            lr: 1e-2,
            batch_size: 100,
            max_iters: 4000,
            ..AdamConfig::with_seed(3)
        };
        let (_, fit) = fit_rank_k(&task, 1, &cfg, 5).unwrap();
        assert!(fit.train_mse < 1e-3, "{fit:?}");
    }

    #[test]
    fn ridge_matches_dense_normal_equations() {
        let d = toy(60, 5, 6);
        let y: Vec<f64> = d.labels.iter().map(|&l| f64::from(u8::from(l < 4))).collect();
        let sys = RidgeSystem::new(&d).unwrap();
        let (w, b) = sys.solve(&d, &y, 0.5).unwrap();
        // Oracle: augmented system with an unpenalized intercept column.
        let n = d.len();
        let x = DMatrix::from_fn(n, 6, |i, j| if j == 5 { 1.0 } else { f64::from(d.image(i)[j]) });
        let mut a = x.transpose() * &x;
        for j in 0..5 {
            a[(j, j)] += 0.5;
        }
        let rhs = x.transpose() * DVector::from_vec(y.clone());
        let sol = a.lu().solve(&rhs).unwrap();
        for j in 0..5 {
            assert!((sol[j] - w[j]).abs() < 1e-10);
        }
        assert!((sol[5] - b).abs() < 1e-10);
    }

    #[test]
    fn clipping_bounds_each_term() {
        assert_eq!(clipped_mse(&[3.0, 0.5], &[0.0, 0.0]), (1.0 + 0.25) / 2.0);
        assert_eq!(mse(&[3.0, 0.5], &[0.0, 0.0]), (9.0 + 0.25) / 2.0);
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 1.0));
    }

    #[test]
    fn probe_grid_is_deterministic() {
        let train = toy(200, 12, 7);
        let test = toy(50, 12, 8);
        let cfg = ProbeConfig {
            digits: vec![0, 3],
            ranks: vec![1, 2],
            adam: AdamConfig {
                lr: 1e-2,
                batch_size: 64,
                max_iters: 50,
                ..AdamConfig::with_seed(0)
            },
            ..ProbeConfig::new(Path::new("."), 9)
        };
        let a = run_probe_on(&cfg, &train, &test).unwrap();
        let b = run_probe_on(&cfg, &train, &test).unwrap();
        assert_eq!(a.fits.len(), 3 * 2 * 2);
        assert_eq!(a.ridge.len(), 3 * 2);
        let strip = |r: &ProbeResults| r.fits.iter().map(|f| (f.train_mse, f.test_mse_clipped, f.iters)).collect::<Vec<_>>();
        assert_eq!(strip(&a), strip(&b));
        assert_eq!(a.ridge, b.ridge);
        assert_eq!(a.summary().len(), 3 * 3);
    }
}
