//! Dense order-N tensors.
//!
//! Storage is generalized row-major: the last index varies fastest. Mode
//! indices in this API are 0-based.
//!
//! Mode-n matricization maps entry `(i_0, .., i_{N-1})` to row `i_n` and to
//! the column obtained by flattening the remaining indices row-major, in
//! their original axis order. [`kron_except`] uses the matching Kronecker
//! order (first vector varies slowest), so that
//! `matricize(⊗v, n) · kron_except(v, n) = (Π_{k≠n} ‖v_k‖²) · v_n`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Shape {
    dims: Vec<usize>,
}

impl Shape {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::InvalidShape("order must be at least 1".into()));
        }
        if let Some(pos) = dims.iter().position(|&d| d == 0) {
            return Err(Error::InvalidShape(format!("dimension {pos} is zero")));
        }
        dims.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::InvalidShape(format!("element count of {dims:?} overflows")))?;
        Ok(Self { dims })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn order(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn max_dim(&self) -> usize {
        self.dims.iter().copied().max().unwrap_or(1)
    }

    /// Row-major strides.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.dims.len()];
        for k in (0..self.dims.len().saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * self.dims[k + 1];
        }
        strides
    }

    pub fn contains(&self, index: &[usize]) -> bool {
        index.len() == self.dims.len() && index.iter().zip(&self.dims).all(|(&i, &d)| i < d)
    }

    pub fn check_index(&self, index: &[usize]) -> Result<()> {
        if self.contains(index) {
            Ok(())
        } else {
            Err(Error::IndexOutOfRange {
                index: index.to_vec(),
                dims: self.dims.clone(),
            })
        }
    }

    pub fn flat_index(&self, index: &[usize]) -> Result<usize> {
        self.check_index(index)?;
        Ok(self.flat_index_unchecked(index))
    }

    pub(crate) fn flat_index_unchecked(&self, index: &[usize]) -> usize {
        index
            .iter()
            .zip(&self.dims)
            .fold(0usize, |acc, (&i, &d)| acc * d + i)
    }

    pub fn unravel(&self, mut flat: usize) -> Vec<usize> {
        let mut index = vec![0; self.dims.len()];
        for k in (0..self.dims.len()).rev() {
            index[k] = flat % self.dims[k];
            flat /= self.dims[k];
        }
        index
    }

    pub(crate) fn expect_same(&self, other: &Shape) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                expected: self.dims.clone(),
                actual: other.dims.clone(),
            })
        }
    }
}

impl TryFrom<Vec<usize>> for Shape {
    type Error = Error;

    fn try_from(dims: Vec<usize>) -> Result<Self> {
        Shape::new(dims)
    }
}

impl From<Shape> for Vec<usize> {
    fn from(shape: Shape) -> Self {
        shape.dims
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::InvalidShape(format!(
                "data length {} does not match element count {} of {:?}",
                data.len(),
                shape.numel(),
                shape.dims()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("tensor data"));
        }
        Ok(Self { shape, data })
    }

    pub(crate) fn from_raw(shape: Shape, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), shape.numel());
        Self { shape, data }
    }

    pub fn zeros(shape: Shape) -> Self {
        let n = shape.numel();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let data = (0..shape.numel()).map(|flat| f(&shape.unravel(flat))).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, index: &[usize]) -> Result<f64> {
        Ok(self.data[self.shape.flat_index(index)?])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        Tensor::from_raw(self.shape.clone(), self.data.iter().map(|x| x * factor).collect())
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.shape.expect_same(&other.shape)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Tensor::from_raw(self.shape.clone(), data))
    }

    /// `self += factor * other`
    pub fn add_scaled(&mut self, factor: f64, other: &Tensor) -> Result<()> {
        self.shape.expect_same(&other.shape)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
        Ok(())
    }

    pub fn norm(&self) -> f64 {
        frobenius_norm(self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidShape("matrix dimensions must be positive".into()));
        }
        if data.len() != rows * cols {
            return Err(Error::InvalidShape(format!(
                "matrix data length {} != {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::ShapeMismatch {
                expected: vec![self.cols],
                actual: vec![v.len()],
            });
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), v)).collect())
    }
}

/// Eight interleaved partial sums, combined in a fixed order: vectorizes
/// and stays bitwise reproducible.
pub(crate) fn dot<T: Copy + Into<f64>>(a: &[T], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(&x, y)| x.into() * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k].into() * y[k];
        }
    }
    let pairs = [acc[0] + acc[4], acc[1] + acc[5], acc[2] + acc[6], acc[3] + acc[7]];
    (pairs[0] + pairs[2]) + (pairs[1] + pairs[3]) + tail
}

pub(crate) fn vec_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Outer product `v_0 ⊗ v_1 ⊗ … ⊗ v_{N-1}`.
pub fn outer_product<V: AsRef<[f64]>>(vectors: &[V]) -> Result<Tensor> {
    if vectors.is_empty() {
        return Err(Error::Empty("outer product needs at least one vector"));
    }
    let shape = Shape::new(vectors.iter().map(|v| v.as_ref().len()).collect())?;
    let mut data = vec![1.0];
    for v in vectors {
        let v = v.as_ref();
        let mut next = Vec::with_capacity(data.len() * v.len());
        for &a in &data {
            next.extend(v.iter().map(|&b| a * b));
        }
        data = next;
    }
    Ok(Tensor::from_raw(shape, data))
}

/// Mode-`mode` matricization (0-based mode).
pub fn matricize(t: &Tensor, mode: usize) -> Result<Matrix> {
    let dims = t.dims();
    let order = dims.len();
    if mode >= order {
        return Err(Error::ModeOutOfRange { mode, order });
    }
    let rows = dims[mode];
    let outer: usize = dims[..mode].iter().product();
    let inner: usize = dims[mode + 1..].iter().product();
    let cols = outer * inner;
    let mut data = vec![0.0; rows * cols];
    // flat = (a * rows + i) * inner + b, column = a * inner + b
    for a in 0..outer {
        for i in 0..rows {
            let src = (a * rows + i) * inner;
            let dst = i * cols + a * inner;
            data[dst..dst + inner].copy_from_slice(&t.data[src..src + inner]);
        }
    }
    Matrix::new(rows, cols, data)
}

/// Inverse of [`matricize`].
pub fn unmatricize(m: &Matrix, shape: &Shape, mode: usize) -> Result<Tensor> {
    let dims = shape.dims();
    let order = dims.len();
    if mode >= order {
        return Err(Error::ModeOutOfRange { mode, order });
    }
    let rows = dims[mode];
    let outer: usize = dims[..mode].iter().product();
    let inner: usize = dims[mode + 1..].iter().product();
    if m.rows != rows || m.cols != outer * inner {
        return Err(Error::ShapeMismatch {
            expected: vec![rows, outer * inner],
            actual: vec![m.rows, m.cols],
        });
    }
    let mut data = vec![0.0; shape.numel()];
    for a in 0..outer {
        for i in 0..rows {
            let dst = (a * rows + i) * inner;
            let src = i * m.cols + a * inner;
            data[dst..dst + inner].copy_from_slice(&m.data[src..src + inner]);
        }
    }
    Ok(Tensor::from_raw(shape.clone(), data))
}

/// Kronecker product of every vector except `vectors[skip]`, ordered to
/// match the column layout of [`matricize`].
pub fn kron_except<V: AsRef<[f64]>>(vectors: &[V], skip: usize) -> Result<Vec<f64>> {
    if vectors.len() < 2 {
        return Err(Error::Empty("kron_except needs at least two vectors"));
    }
    if skip >= vectors.len() {
        return Err(Error::ModeOutOfRange {
            mode: skip,
            order: vectors.len(),
        });
    }
    let mut out = vec![1.0];
    for (k, v) in vectors.iter().enumerate() {
        if k == skip {
            continue;
        }
        let v = v.as_ref();
        let mut next = Vec::with_capacity(out.len() * v.len());
        for &a in &out {
            next.extend(v.iter().map(|&b| a * b));
        }
        out = next;
    }
    Ok(out)
}

pub fn inner(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.shape.expect_same(&b.shape)?;
    Ok(dot(&a.data, &b.data))
}

pub fn frobenius_norm(a: &Tensor) -> f64 {
    vec_norm(&a.data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn shape(d: &[usize]) -> Shape {
        Shape::new(d.to_vec()).unwrap()
    }

    #[test]
    fn shape_validation() {
        assert!(Shape::new(vec![]).is_err());
        assert!(Shape::new(vec![3, 0]).is_err());
        assert!(Shape::new(vec![usize::MAX, 2]).is_err());
        assert_eq!(shape(&[2, 3, 4]).strides(), vec![12, 4, 1]);
    }

    #[test]
    fn flat_index_roundtrip_exhaustive() {
        for dims in [&[3][..], &[2, 3], &[2, 3, 4], &[3, 1, 2, 2]] {
            let s = shape(dims);
            let t = Tensor::from_fn(s.clone(), |idx| s.flat_index(idx).unwrap() as f64);
            for flat in 0..s.numel() {
                let idx = s.unravel(flat);
                assert_eq!(s.flat_index(&idx).unwrap(), flat);
                assert_eq!(t.get(&idx).unwrap(), flat as f64);
            }
        }
        assert!(shape(&[2, 2]).flat_index(&[2, 0]).is_err());
        assert!(shape(&[2, 2]).flat_index(&[0]).is_err());
    }

    #[test]
    fn outer_product_basics() {
        let t = outer_product(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(t.get(&[0, 0, 0]).unwrap(), 1.0);
        assert_eq!(t.data().iter().sum::<f64>(), 1.0);

        let t = outer_product(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(t.data(), &[3.0, 4.0, 6.0, 8.0]);

        let empty: [Vec<f64>; 0] = [];
        assert!(outer_product(&empty).is_err());
    }

    #[test]
    fn outer_product_matches_entry_formula() {
        let vs = [vec![0.3, -1.2, 0.7], vec![2.0, 0.5, -0.1, 1.1], vec![-0.4, 0.9]];
        let t = outer_product(&vs).unwrap();
        let mut brute_sq = 0.0;
        for i in 0..3 {
            for j in 0..4 {
                for k in 0..2 {
                    let e = vs[0][i] * vs[1][j] * vs[2][k];
                    assert_eq!(t.get(&[i, j, k]).unwrap(), e);
                    brute_sq += e * e;
                }
            }
        }
        let prod: f64 = vs.iter().map(|v| vec_norm(v)).product();
        assert!((brute_sq.sqrt() - prod).abs() <= 1e-12 * prod);
        assert!((t.norm() - prod).abs() <= 1e-12 * prod);
    }

    #[test]
    fn matricize_order_two_is_matrix_and_transpose() {
        let t = Tensor::new(shape(&[2, 3]), (0..6).map(f64::from).collect()).unwrap();
        let m1 = matricize(&t, 0).unwrap();
        assert_eq!(m1.data(), t.data());
        let m2 = matricize(&t, 1).unwrap();
        assert_eq!((m2.rows(), m2.cols()), (3, 2));
        assert_eq!(m2.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        assert!(matricize(&t, 2).is_err());
    }

    #[test]
    fn matricize_matches_index_map_oracle() {
        // Enumerate every (i, j, k) and place it by the column convention.
        let s = shape(&[2, 2, 2]);
        let t = Tensor::new(s.clone(), (0..8).map(f64::from).collect()).unwrap();
        for mode in 0..3 {
            let m = matricize(&t, mode).unwrap();
            for flat in 0..8 {
                let idx = s.unravel(flat);
                let rest: Vec<usize> = (0..3).filter(|&k| k != mode).map(|k| idx[k]).collect();
                let col = rest[0] * 2 + rest[1];
                assert_eq!(m.get(idx[mode], col), flat as f64);
            }
        }
        let expected_mode0 = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0];
        assert_eq!(matricize(&t, 0).unwrap().data(), &expected_mode0);
        let expected_mode1 = [0.0, 1.0, 4.0, 5.0, 2.0, 3.0, 6.0, 7.0];
        assert_eq!(matricize(&t, 1).unwrap().data(), &expected_mode1);
        let expected_mode2 = [0.0, 2.0, 4.0, 6.0, 1.0, 3.0, 5.0, 7.0];
        assert_eq!(matricize(&t, 2).unwrap().data(), &expected_mode2);
    }

    #[test]
    fn kron_except_small_cases() {
        let v = [vec![5.0], vec![2.0, 3.0]];
        assert_eq!(kron_except(&v, 0).unwrap(), vec![2.0, 3.0]);
        let ones = [vec![1.0, 1.0], vec![1.0, 1.0, 1.0]];
        assert_eq!(kron_except(&ones, 1).unwrap(), vec![1.0, 1.0]);
        assert!(kron_except(&ones, 2).is_err());
        assert!(kron_except(&[vec![1.0]], 0).is_err());
    }

    #[test]
    fn inner_and_norm() {
        let s = shape(&[2, 2, 2]);
        let ones = Tensor::new(s.clone(), vec![1.0; 8]).unwrap();
        assert!((frobenius_norm(&ones) - 8f64.sqrt()).abs() < 1e-15);
        assert_eq!(inner(&ones, &ones).unwrap(), 8.0);
        let other = Tensor::zeros(shape(&[2, 4]));
        assert!(inner(&ones, &other).is_err());
        assert!(Tensor::new(s, vec![f64::NAN; 8]).is_err());
    }

    fn vectors_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(1usize..5, 3..=4).prop_flat_map(|dims| {
            dims.into_iter()
                .map(|d| prop::collection::vec(-2.0f64..2.0, d))
                .collect::<Vec<_>>()
        })
    }

    proptest! {
        #[test]
        fn matricize_kron_consistency(vs in vectors_strategy(), skip_seed in 0usize..4) {
            let skip = skip_seed % vs.len();
            let t = outer_product(&vs).unwrap();
            let m = matricize(&t, skip).unwrap();
            let k = kron_except(&vs, skip).unwrap();
            let lhs = m.matvec(&k).unwrap();
            let scale: f64 = vs.iter().enumerate().filter(|&(i, _)| i != skip)
                .map(|(_, v)| dot(v, v)).product();
            let tol = 1e-10 * (1.0 + scale * vec_norm(&vs[skip]));
            for (a, b) in lhs.iter().zip(&vs[skip]) {
                prop_assert!((a - scale * b).abs() <= tol);
            }
        }

        #[test]
        fn outer_norm_is_product_of_norms(vs in vectors_strategy()) {
            let t = outer_product(&vs).unwrap();
            let prod: f64 = vs.iter().map(|v| vec_norm(v)).product();
            prop_assert!((t.norm() - prod).abs() <= 1e-12 * prod.max(1e-300));
        }

        #[test]
        fn matricized_contraction_matches_inner(
            vs in vectors_strategy(),
            skip_seed in 0usize..4,
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let skip = skip_seed % vs.len();
            let s = Shape::new(vs.iter().map(Vec::len).collect()).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let w = Tensor::from_fn(s.clone(), |_| rng.gen_range(-1.0..1.0));
            let lhs = dot(&matricize(&w, skip).unwrap().matvec(&kron_except(&vs, skip).unwrap()).unwrap(), &vs[skip]);
            let rhs = inner(&w, &outer_product(&vs).unwrap()).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + rhs.abs()));
        }

        #[test]
        fn matricize_roundtrip(dims in prop::collection::vec(1usize..5, 1..5), mode_seed in 0usize..5) {
            let s = Shape::new(dims).unwrap();
            let mode = mode_seed % s.order();
            let t = Tensor::from_fn(s.clone(), |idx| s.flat_index(idx).unwrap() as f64 * 0.5 - 3.0);
            let back = unmatricize(&matricize(&t, mode).unwrap(), &s, mode).unwrap();
            prop_assert_eq!(back, t);
        }

        #[test]
        fn cauchy_schwarz(a in prop::collection::vec(-3.0f64..3.0, 12), b in prop::collection::vec(-3.0f64..3.0, 12)) {
            let s = Shape::new(vec![2, 3, 2]).unwrap();
            let ta = Tensor::new(s.clone(), a).unwrap();
            let tb = Tensor::new(s, b).unwrap();
            prop_assert!(inner(&ta, &tb).unwrap().abs() <= ta.norm() * tb.norm() * (1.0 + 1e-12));
        }
    }
}
