//! Dense row-major tensors.
//!
//! Every reduction runs in a fixed index order so results are bit-stable
//! for a given precision regardless of how callers schedule work.

use crate::error::{Error, Result};

use super::rng::SeededRng;
use super::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape(format!("zero-sized dimension in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(format!(
                "expected a matrix, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn row(&self, r: usize) -> &[T] {
        let cols = *self.shape.last().expect("non-scalar tensor");
        &self.data[r * cols..(r + 1) * cols]
    }
}

impl<T: Clone> Tensor<T> {
    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![value; numel])
    }

    /// Gather rows of a matrix by index.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Self> {
        let (rows, cols) = self.dims2()?;
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(Error::Domain(format!("row index {i} out of range {rows}")));
            }
            out.extend_from_slice(&self.data[i * cols..(i + 1) * cols]);
        }
        Tensor::new(&[idx.len(), cols], out)
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        let (rows, cols) = self.dims2()?;
        if start >= end || end > rows {
            return Err(Error::shape(format!("row slice {start}..{end} of {rows}")));
        }
        Tensor::new(&[end - start, cols], self.data[start * cols..end * cols].to_vec())
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Self> {
        let (rows, cols) = self.dims2()?;
        if start >= end || end > cols {
            return Err(Error::shape(format!("col slice {start}..{end} of {cols}")));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(rows * w);
        for r in 0..rows {
            out.extend_from_slice(&self.data[r * cols + start..r * cols + end]);
        }
        Tensor::new(&[rows, w], out)
    }

    pub fn concat_rows(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let (_, cols) = first.dims2()?;
        let mut rows = 0;
        let mut out = Vec::new();
        for p in parts {
            let (r, c) = p.dims2()?;
            if c != cols {
                return Err(Error::shape(format!("row concat width {c} vs {cols}")));
            }
            rows += r;
            out.extend_from_slice(&p.data);
        }
        Tensor::new(&[rows, cols], out)
    }

    pub fn concat_cols(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let (rows, _) = first.dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = p.dims2()?;
            if r != rows {
                return Err(Error::shape(format!("col concat height {r} vs {rows}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.data[r * w..(r + 1) * w]);
            }
        }
        Tensor::new(&[rows, total], out)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (rows, cols) = self.dims2()?;
        let mut out = Vec::with_capacity(rows * cols);
        for c in 0..cols {
            for r in 0..rows {
                out.push(self.data[r * cols + c].clone());
            }
        }
        Tensor::new(&[cols, rows], out)
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Tensor::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Tensor::full(shape, T::one())
    }

    pub fn scalar(x: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![x],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]).expect("n > 0");
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Tensor::new(shape, data.iter().map(|&x| T::of(x)).collect())
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let numel = shape.iter().product();
        Tensor::new(shape, (0..numel).map(&mut f).collect())
    }

    /// Gaussian entries with the given standard deviation.
    pub fn randn(shape: &[usize], std: f64, rng: &mut SeededRng) -> Result<Self> {
        let numel = shape.iter().product();
        Tensor::new(shape, (0..numel).map(|_| T::of(std * rng.normal())).collect())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::of(x.to_f64())).collect(),
        }
    }

    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::shape(format!("item() on shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "elementwise shapes {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "accumulate {:?} into {:?}",
                other.shape, self.shape
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn sum_all(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc + x)
    }

    pub fn mean_all(&self) -> T {
        self.sum_all() / T::of(self.numel() as f64)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Result<T> {
        Ok(self.sub(other)?.max_abs())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn ensure_finite(&self, site: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::non_finite(site))
        }
    }

    /// Matrix product `self[m×k] · other[k×n]`.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Self> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dims {m}x{k} · {k2}x{n}"
            )));
        }
        let mut out = vec![T::zero(); m * n];
        let a = &self.data;
        let b = &other.data;
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a[i * k + p];
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o = *o + aip * bv;
                }
            }
        }
        Tensor::new(&[m, n], out)
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_nt(&self, other: &Tensor<T>) -> Result<Self> {
        self.matmul(&other.transpose()?)
    }

    /// Softmax along `axis`, guarded by max subtraction. Entries equal to
    /// `-inf` receive exactly zero mass.
    pub fn softmax(&self, axis: usize) -> Result<Self> {
        let (outer, len, inner) = self.axis_split(axis)?;
        let mut out = self.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mut m = T::neg_infinity();
                for j in 0..len {
                    m = m.max(self.data[at(j)]);
                }
                let mut z = T::zero();
                for j in 0..len {
                    let e = (self.data[at(j)] - m).exp();
                    out[at(j)] = e;
                    z = z + e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / z;
                }
            }
        }
        Tensor::new(&self.shape, out)
    }

    pub fn softmax_rows(&self) -> Result<Self> {
        self.dims2()?;
        self.softmax(1)
    }

    /// Index of the maximum along `axis`; ties resolve to the smallest index.
    pub fn argmax(&self, axis: usize) -> Result<Tensor<usize>> {
        let (outer, len, inner) = self.axis_split(axis)?;
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                let mut best_v = self.data[o * len * inner + i];
                for j in 1..len {
                    let v = self.data[o * len * inner + j * inner + i];
                    if v > best_v {
                        best = j;
                        best_v = v;
                    }
                }
                out.push(best);
            }
        }
        let mut shape: Vec<usize> = self.shape.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Tensor::new(&shape, out)
    }

    /// Per-row normalization to zero mean and unit variance (no affine terms).
    pub fn layer_norm_rows(&self, eps: T) -> Result<Self> {
        let (rows, cols) = self.dims2()?;
        let n = T::of(cols as f64);
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let x = &self.data[r * cols..(r + 1) * cols];
            let mean = x.iter().fold(T::zero(), |a, &v| a + v) / n;
            let var = x.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
            let inv = T::one() / (var + eps).sqrt();
            out.extend(x.iter().map(|&v| (v - mean) * inv));
        }
        Tensor::new(&self.shape, out)
    }

    fn axis_split(&self, axis: usize) -> Result<(usize, usize, usize)> {
        if axis >= self.rank() {
            return Err(Error::Domain(format!(
                "axis {axis} invalid for rank {}",
                self.rank()
            )));
        }
        let outer = self.shape[..axis].iter().product();
        let len = self.shape[axis];
        let inner = self.shape[axis + 1..].iter().product();
        Ok((outer, len, inner))
    }

    /// SHA-256 over the shape and little-endian payload.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for &d in &self.shape {
            h.update((d as u64).to_le_bytes());
        }
        let mut buf = Vec::with_capacity(self.numel() * 8);
        for &x in &self.data {
            x.write_le(&mut buf);
        }
        h.update(&buf);
        let digest = h.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Argmax over a slice with the smallest-index tie rule. Tensors never have
/// zero-length axes, so this is where the empty case surfaces.
pub fn argmax_slice<T: PartialOrd + Copy>(xs: &[T]) -> Result<usize> {
    let (&first, rest) = xs
        .split_first()
        .ok_or_else(|| Error::Domain("argmax over an empty axis".into()))?;
    let mut best = 0;
    let mut best_v = first;
    for (j, &v) in rest.iter().enumerate() {
        if v > best_v {
            best = j + 1;
            best_v = v;
        }
    }
    Ok(best)
}
