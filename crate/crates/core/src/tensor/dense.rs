use serde::{Deserialize, Serialize};

use super::cap::check_capacity;
use crate::error::{invalid, shape_err, Result};
use crate::xi::Xi;

/// Dense real tensor in row-major layout.
///
/// An empty shape denotes an order-0 scalar holding exactly one value; every
/// other tensor has strictly positive mode sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor", into = "RawTensor")]
pub struct DenseTensor {
    shape: Vec<usize>,
    strides: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TryFrom<RawTensor> for DenseTensor {
    type Error = crate::error::Error;

    fn try_from(raw: RawTensor) -> Result<Self> {
        DenseTensor::new(raw.shape, raw.data)
    }
}

impl From<DenseTensor> for RawTensor {
    fn from(t: DenseTensor) -> Self {
        RawTensor { shape: t.shape, data: t.data }
    }
}

pub(crate) fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for k in (0..shape.len().saturating_sub(1)).rev() {
        strides[k] = strides[k + 1] * shape[k + 1];
    }
    strides
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(invalid!("mode sizes must be positive, got {shape:?}"));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(shape_err!("shape {shape:?} needs {len} values, got {}", data.len()));
        }
        let strides = row_major_strides(&shape);
        Ok(Self { shape, strides, data })
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: Vec::new(), strides: Vec::new(), data: vec![value] }
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Result<Self> {
        let len = check_capacity(shape)?;
        Self::new(shape.to_vec(), vec![value; len])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Result<Self> {
        let len = check_capacity(shape)?;
        let mut data = Vec::with_capacity(len);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..len {
            data.push(f(&idx));
            increment(&mut idx, shape);
        }
        Self::new(shape.to_vec(), data)
    }

    pub fn vector(values: Vec<f64>) -> Result<Self> {
        Self::new(vec![values.len()], values)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::new(vec![n, n], data).expect("square identity")
    }

    /// Tensor with a single unit entry at `index`.
    pub fn one_hot(shape: &[usize], index: &[usize]) -> Result<Self> {
        let mut t = Self::zeros(shape)?;
        let flat = t.try_flat_index(index)?;
        t.data[flat] = 1.0;
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn order(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn flat_index(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    pub fn try_flat_index(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() {
            return Err(shape_err!("index of length {} for order-{} tensor", index.len(), self.order()));
        }
        for (k, (&i, &d)) in index.iter().zip(&self.shape).enumerate() {
            if i >= d {
                return Err(invalid!("index {i} out of range for mode {k} of size {d}"));
            }
        }
        Ok(self.flat_index(index))
    }

    pub fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.shape.len()];
        for (slot, &s) in idx.iter_mut().zip(&self.strides) {
            *slot = flat / s;
            flat %= s;
        }
        idx
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.flat_index(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let k = self.flat_index(index);
        self.data[k] = value;
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            strides: self.strides.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        self.map(|x| alpha * x)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Largest absolute entrywise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.ensure_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Self::new(self.shape.clone(), data)
    }

    pub fn add_scaled(&mut self, alpha: f64, other: &Self) -> Result<()> {
        self.ensure_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn is_integral(&self) -> bool {
        self.data.iter().all(|x| x.fract() == 0.0)
    }

    fn ensure_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err!("{:?} vs {:?}", self.shape, other.shape));
        }
        Ok(())
    }

    /// Row `r` of an order-2 tensor.
    pub fn row(&self, r: usize) -> &[f64] {
        debug_assert_eq!(self.order(), 2);
        let cols = self.shape[1];
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        debug_assert_eq!(self.order(), 2);
        (0..self.shape[0]).map(|r| self.data[r * self.shape[1] + c]).collect()
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.order() != 2 {
            return Err(shape_err!("transpose needs an order-2 tensor, got {:?}", self.shape));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        Self::from_fn(&[c, r], |ix| self.data[ix[1] * c + ix[0]])
    }

    /// Matrix product of two order-2 tensors.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.order() != 2 || other.order() != 2 || self.shape[1] != other.shape[0] {
            return Err(shape_err!("matmul {:?} x {:?}", self.shape, other.shape));
        }
        let (n, k, m) = (self.shape[0], self.shape[1], other.shape[1]);
        check_capacity(&[n, m])?;
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for p in 0..k {
                let a = self.data[i * k + p];
                let brow = &other.data[p * m..(p + 1) * m];
                for (o, b) in out[i * m..(i + 1) * m].iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Self::new(vec![n, m], out)
    }

    /// Matrix-vector product `A x` for an order-2 tensor.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if self.order() != 2 || self.shape[1] != x.len() {
            return Err(shape_err!("matvec {:?} x [{}]", self.shape, x.len()));
        }
        Ok((0..self.shape[0]).map(|r| dot(self.row(r), x)).collect())
    }
}

/// Advances a row-major multi-index by one position.
pub(crate) fn increment(idx: &mut [usize], shape: &[usize]) {
    for k in (0..idx.len()).rev() {
        idx[k] += 1;
        if idx[k] < shape[k] {
            return;
        }
        idx[k] = 0;
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Standard outer product: `C[i.., j..] = A[i..] * B[j..]`.
pub fn outer(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    outer_with(a, b, |x, y| x * y)
}

/// Generalized outer product: `C[i.., j..] = xi(A[i..], B[j..])`.
pub fn gen_outer(xi: Xi, a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    outer_with(a, b, |x, y| xi.apply2(x, y))
}

fn outer_with(a: &DenseTensor, b: &DenseTensor, op: impl Fn(f64, f64) -> f64) -> Result<DenseTensor> {
    let shape: Vec<usize> = a.shape.iter().chain(&b.shape).copied().collect();
    let len = check_capacity(&shape)?;
    let mut data = Vec::with_capacity(len);
    for &x in &a.data {
        data.extend(b.data.iter().map(|&y| op(x, y)));
    }
    DenseTensor::new(shape, data)
}

/// Frobenius inner product of two tensors of identical shape.
pub fn inner(a: &DenseTensor, b: &DenseTensor) -> Result<f64> {
    if a.shape != b.shape {
        return Err(shape_err!("inner product of {:?} and {:?}", a.shape, b.shape));
    }
    Ok(dot(&a.data, &b.data))
}

/// A tensor reshaped into a matrix: rows enumerate `row_modes`, columns
/// enumerate `col_modes`, both in row-major order of the listed modes.
#[derive(Clone, Debug, PartialEq)]
pub struct Matricization {
    pub row_modes: Vec<usize>,
    pub col_modes: Vec<usize>,
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows x cols` values.
    pub data: Vec<f64>,
    tensor_shape: Vec<usize>,
}

impl Matricization {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn as_tensor(&self) -> DenseTensor {
        DenseTensor::new(vec![self.rows, self.cols], self.data.clone()).expect("consistent")
    }

    /// Reassembles the original tensor.
    pub fn fold(&self) -> DenseTensor {
        let mut out = DenseTensor::new(self.tensor_shape.clone(), vec![0.0; self.data.len()]).expect("shape");
        let (rs, cs) = self.mode_strides();
        let mut idx = vec![0usize; self.tensor_shape.len()];
        for flat in 0..out.len() {
            let r: usize = self.row_modes.iter().zip(&rs).map(|(&m, s)| idx[m] * s).sum();
            let c: usize = self.col_modes.iter().zip(&cs).map(|(&m, s)| idx[m] * s).sum();
            out.data[flat] = self.data[r * self.cols + c];
            increment(&mut idx, &self.tensor_shape);
        }
        out
    }

    fn mode_strides(&self) -> (Vec<usize>, Vec<usize>) {
        let dims = |modes: &[usize]| -> Vec<usize> {
            row_major_strides(&modes.iter().map(|&m| self.tensor_shape[m]).collect::<Vec<_>>())
        };
        (dims(&self.row_modes), dims(&self.col_modes))
    }
}

/// Matricizes `h` with the (0-based) modes in `rows` as row index and `cols`
/// as column index. The two lists must partition `0..order`.
pub fn matricize(h: &DenseTensor, rows: &[usize], cols: &[usize]) -> Result<Matricization> {
    let order = h.order();
    let mut seen = vec![false; order];
    for &m in rows.iter().chain(cols) {
        if m >= order || seen[m] {
            return Err(invalid!("modes {rows:?} / {cols:?} do not partition 0..{order}"));
        }
        seen[m] = true;
    }
    if seen.iter().any(|s| !s) {
        return Err(invalid!("modes {rows:?} / {cols:?} do not partition 0..{order}"));
    }
    let nrows: usize = rows.iter().map(|&m| h.shape[m]).product();
    let ncols: usize = cols.iter().map(|&m| h.shape[m]).product();
    let mut m = Matricization {
        row_modes: rows.to_vec(),
        col_modes: cols.to_vec(),
        rows: nrows,
        cols: ncols,
        data: vec![0.0; h.len()],
        tensor_shape: h.shape.clone(),
    };
    let (rs, cs) = m.mode_strides();
    let mut idx = vec![0usize; order];
    for &v in &h.data {
        let r: usize = rows.iter().zip(&rs).map(|(&k, s)| idx[k] * s).sum();
        let c: usize = cols.iter().zip(&cs).map(|(&k, s)| idx[k] * s).sum();
        m.data[r * ncols + c] = v;
        increment(&mut idx, &h.shape);
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f64]) -> DenseTensor {
        DenseTensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn outer_of_vectors() {
        let c = outer(&t(&[2], &[1.0, 2.0]), &t(&[2], &[3.0, 4.0])).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.data(), &[3.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn outer_with_scalar_is_identity() {
        let b = t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 7.0]);
        assert_eq!(outer(&DenseTensor::scalar(1.0), &b).unwrap(), b);
    }

    #[test]
    fn outer_order_three_entry() {
        let c = outer(&t(&[3], &[1.0, 0.0, 2.0]), &t(&[2, 2], &[1.0, 1.0, 0.0, 1.0])).unwrap();
        assert_eq!(c.shape(), &[3, 2, 2]);
        // 1-based entry (3,2,2) of the spec example is A[2] * B[1,1].
        assert_eq!(c.get(&[2, 1, 1]), 2.0);
        for (flat, &v) in c.data().iter().enumerate() {
            let ix = c.multi_index(flat);
            let a = [1.0, 0.0, 2.0][ix[0]];
            let b = [[1.0, 1.0], [0.0, 1.0]][ix[1]][ix[2]];
            assert_eq!(v, a * b);
        }
    }

    #[test]
    fn gen_outer_examples() {
        let c = gen_outer(Xi::RectMax, &t(&[2], &[-1.0, 2.0]), &t(&[1], &[1.0])).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0]);
        let c = gen_outer(Xi::L2, &t(&[1], &[3.0]), &t(&[1], &[4.0])).unwrap();
        assert_eq!(c.data(), &[5.0]);
    }

    #[test]
    fn inner_examples() {
        let ones = DenseTensor::filled(&[2, 2, 2], 1.0).unwrap();
        let zeros = DenseTensor::zeros(&[2, 2, 2]).unwrap();
        assert_eq!(inner(&ones, &ones).unwrap(), 8.0);
        assert_eq!(inner(&ones, &zeros).unwrap(), 0.0);
        assert!(inner(&ones, &DenseTensor::zeros(&[2, 4]).unwrap()).is_err());
    }

    #[test]
    fn inner_matches_loop_oracle() {
        let a = t(&[2, 2, 2], &[0.3, -1.2, 2.5, 0.7, -0.4, 1.1, 0.9, -2.0]);
        let b = t(&[2, 2, 2], &[1.5, 0.2, -0.6, 3.1, 0.8, -1.7, 0.05, 0.4]);
        let mut expected = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    expected += a.get(&[i, j, k]) * b.get(&[i, j, k]);
                }
            }
        }
        assert!((inner(&a, &b).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn capacity_error_without_allocation() {
        let big = DenseTensor::zeros(&[10_000]).unwrap();
        let err = outer(&big, &big).and_then(|x| outer(&x, &big)).unwrap_err();
        assert!(matches!(err, crate::Error::Capacity { .. }));
    }

    #[test]
    fn matricize_order_two() {
        let m = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let a = matricize(&m, &[0], &[1]).unwrap();
        assert_eq!((a.rows, a.cols), (2, 3));
        assert_eq!(a.data, m.data());
        let b = matricize(&m, &[1], &[0]).unwrap();
        assert_eq!(b.as_tensor(), m.transpose().unwrap());
    }

    #[test]
    fn matricize_odd_even_matches_index_merge() {
        let h =
            DenseTensor::from_fn(&[2, 2, 2, 2], |ix| (ix[0] * 8 + ix[1] * 4 + ix[2] * 2 + ix[3]) as f64 * 0.37 - 1.0)
                .unwrap();
        let m = matricize(&h, &[0, 2], &[1, 3]).unwrap();
        assert_eq!((m.rows, m.cols), (4, 4));
        for i1 in 0..2 {
            for i2 in 0..2 {
                for i3 in 0..2 {
                    for i4 in 0..2 {
                        assert_eq!(m.get(i1 * 2 + i3, i2 * 2 + i4), h.get(&[i1, i2, i3, i4]));
                    }
                }
            }
        }
    }

    #[test]
    fn matricize_rejects_bad_partitions() {
        let h = DenseTensor::zeros(&[2, 2, 2]).unwrap();
        assert!(matricize(&h, &[0], &[1]).is_err());
        assert!(matricize(&h, &[0, 1], &[1, 2]).is_err());
        assert!(matricize(&h, &[0, 3], &[1, 2]).is_err());
    }

    #[test]
    fn flat_and_multi_index_are_inverse() {
        let h = DenseTensor::zeros(&[3, 1, 4, 2]).unwrap();
        for flat in 0..h.len() {
            assert_eq!(h.flat_index(&h.multi_index(flat)), flat);
        }
    }

    fn tensor_strategy() -> impl Strategy<Value = DenseTensor> {
        prop::collection::vec(1usize..4, 1..5).prop_flat_map(|shape| {
            let n: usize = shape.iter().product();
            prop::collection::vec(-10.0f64..10.0, n)
                .prop_map(move |data| DenseTensor::new(shape.clone(), data).unwrap())
        })
    }

    proptest! {
        #[test]
        fn gen_outer_product_equals_outer(a in tensor_strategy(), b in tensor_strategy()) {
            prop_assert_eq!(gen_outer(Xi::Product, &a, &b).unwrap(), outer(&a, &b).unwrap());
        }

        #[test]
        fn outer_is_homogeneous(a in tensor_strategy(), b in tensor_strategy(), alpha in -4.0f64..4.0) {
            let lhs = outer(&a.scaled(alpha), &b).unwrap();
            let rhs = outer(&a, &b).unwrap().scaled(alpha);
            prop_assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-12 * (1.0 + rhs.frobenius_norm()));
        }

        #[test]
        fn matricize_fold_roundtrip(h in tensor_strategy(), seed in any::<u64>()) {
            let order = h.order();
            let mut modes: Vec<usize> = (0..order).collect();
            // deterministic shuffle from the seed
            let mut s = seed;
            for k in (1..order).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                modes.swap(k, (s >> 33) as usize % (k + 1));
            }
            let split = (seed as usize) % (order + 1);
            let m = matricize(&h, &modes[..split], &modes[split..]).unwrap();
            prop_assert_eq!(m.fold(), h);
        }
    }
}
