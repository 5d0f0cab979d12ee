//! Dense row-major `f64` tensors.
//!
//! All reductions and products sum in ascending index order starting from
//! `0.0`, so results are bit-reproducible for a given input.

use std::io::{Read, Write};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result, SnipError};
use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub const CONTAINER_MAGIC: &[u8; 5] = b"SNIPT";
pub const CONTAINER_VERSION: u32 = 1;

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Builds a tensor, checking `product(shape) == data.len()` and finiteness.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(shape_err(format!("dimensions must be positive, got {shape:?}")));
        }
        if numel(shape) != data.len() {
            return Err(shape_err(format!(
                "shape {shape:?} needs {} values, got {}",
                numel(shape),
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(invalid(format!("non-finite entry {bad}")));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Internal constructor for values already known to be consistent.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_parts(shape.to_vec(), vec![0.0; numel(shape)])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::from_parts(shape.to_vec(), vec![value; numel(shape)])
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` view: the last dimension is the column axis and every
    /// leading dimension folds into rows.
    pub fn matrix_dims(&self) -> (usize, usize) {
        let cols = *self.shape.last().expect("tensor has at least one dimension");
        (self.data.len() / cols, cols)
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        let (_, cols) = self.matrix_dims();
        self.data[r * cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let (_, cols) = self.matrix_dims();
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(shape_err(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        Ok(Self::from_parts(shape.to_vec(), self.data.clone()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(shape_err(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(Self::from_parts(
            self.shape.clone(),
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc + v * v)
    }

    /// Frobenius norm. Errors on an empty tensor.
    pub fn frobenius_norm(&self) -> Result<f64> {
        if self.data.is_empty() {
            return Err(invalid("frobenius norm of an empty tensor"));
        }
        Ok(self.sum_squares().sqrt())
    }

    /// Norm for tensors constructed through this module, which are never empty.
    pub fn norm(&self) -> f64 {
        self.sum_squares().sqrt()
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.shape.len() != 2 {
            return Err(shape_err(format!("transpose needs a matrix, got {:?}", self.shape)));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self::from_parts(vec![c, r], out))
    }

    fn expect_matrix(&self, what: &str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(shape_err(format!("{what} must be a matrix, got {:?}", self.shape)));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    /// `self[M×K] · other[K×N]`. Each output entry sums over `k` ascending.
    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        let (m, k) = self.expect_matrix("lhs")?;
        let (k2, n) = other.expect_matrix("rhs")?;
        if k != k2 {
            return Err(shape_err(format!("matmul inner dims {k} vs {k2}")));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                let brow = &other.data[p * n..(p + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(Self::from_parts(vec![m, n], out))
    }

    /// `self[M×K] · other[N×K]ᵀ`, summing over `k` ascending.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Self> {
        let (m, k) = self.expect_matrix("lhs")?;
        let (n, k2) = other.expect_matrix("rhs")?;
        if k != k2 {
            return Err(shape_err(format!("matmul_nt inner dims {k} vs {k2}")));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &other.data[j * k..(j + 1) * k];
                let mut s = 0.0;
                for (&a, &b) in arow.iter().zip(brow) {
                    s += a * b;
                }
                out[i * n + j] = s;
            }
        }
        Ok(Self::from_parts(vec![m, n], out))
    }

    /// `self[M×N]ᵀ · other[M×K]`, summing over `m` ascending.
    pub fn matmul_tn(&self, other: &Tensor) -> Result<Self> {
        let (m, n) = self.expect_matrix("lhs")?;
        let (m2, k) = other.expect_matrix("rhs")?;
        if m != m2 {
            return Err(shape_err(format!("matmul_tn inner dims {m} vs {m2}")));
        }
        let mut out = vec![0.0; n * k];
        for p in 0..m {
            let arow = &self.data[p * n..(p + 1) * n];
            let brow = &other.data[p * k..(p + 1) * k];
            for (j, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let orow = &mut out[j * k..(j + 1) * k];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(Self::from_parts(vec![n, k], out))
    }

    /// Writes the binary container: magic, version, ndim, dims, payload (all
    /// little-endian).
    pub fn write_container<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CONTAINER_MAGIC)?;
        w.write_all(&CONTAINER_VERSION.to_le_bytes())?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_container<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != CONTAINER_MAGIC {
            return Err(SnipError::Format("bad tensor container magic".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != CONTAINER_VERSION {
            return Err(SnipError::Format(format!("unsupported container version {version}")));
        }
        r.read_exact(&mut b4)?;
        let ndim = u32::from_le_bytes(b4) as usize;
        let mut shape = Vec::with_capacity(ndim);
        let mut b8 = [0u8; 8];
        for _ in 0..ndim {
            r.read_exact(&mut b8)?;
            shape.push(u64::from_le_bytes(b8) as usize);
        }
        let n = numel(&shape);
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut b8)?;
            data.push(f64::from_le_bytes(b8));
        }
        Tensor::from_vec(&shape, data).map_err(|e| SnipError::Format(e.to_string()))
    }

    pub fn to_container_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(13 + 8 * self.shape.len() + 8 * self.data.len());
        self.write_container(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }
}

/// Frobenius norm, `sqrt(Σ x²)`.
pub fn frobenius_norm(t: &Tensor) -> Result<f64> {
    t.frobenius_norm()
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.matmul(b)
}

/// I.i.d. `N(0, sigma²)` entries drawn from a fresh generator on `rng`.
pub fn sample_gaussian(shape: &[usize], sigma: f64, rng: &RngStream) -> Result<Tensor> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(invalid(format!("sigma must be positive, got {sigma}")));
    }
    if shape.is_empty() || shape.contains(&0) {
        return Err(shape_err(format!("dimensions must be positive, got {shape:?}")));
    }
    let mut g = rng.generator();
    let data = (0..numel(shape))
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut g);
            sigma * z
        })
        .collect();
    Ok(Tensor::from_parts(shape.to_vec(), data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.data()[i * k + p] * b.data()[p * n + j];
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(&[rows, cols], data).unwrap()
    }

    #[test]
    fn frobenius_examples() {
        let t = Tensor::from_vec(&[1, 2], vec![3.0, 4.0]).unwrap();
        assert_eq!(frobenius_norm(&t).unwrap(), 5.0);
        assert_eq!(frobenius_norm(&Tensor::zeros(&[3, 5, 2])).unwrap(), 0.0);
        assert_eq!(frobenius_norm(&Tensor::full(&[8, 8], 1.0)).unwrap(), 8.0);
    }

    #[test]
    fn empty_tensors_are_rejected() {
        assert!(Tensor::from_vec(&[0, 3], vec![]).is_err());
        let empty = Tensor {
            shape: vec![0],
            data: vec![],
        };
        assert!(matches!(empty.frobenius_norm(), Err(SnipError::InvalidArgument(_))));
    }

    #[test]
    fn non_finite_rejected() {
        assert!(Tensor::from_vec(&[2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::from_vec(&[2], vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn matmul_examples() {
        let b = Tensor::from_vec(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(Tensor::identity(3).matmul(&b).unwrap(), b);

        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let v = Tensor::from_vec(&[2, 1], vec![5.0, 6.0]).unwrap();
        assert_eq!(a.matmul(&v).unwrap().data(), &[17.0, 39.0]);

        let mut rng = RngStream::new(11).generator();
        let a = random_matrix(4, 5, &mut rng);
        let b = random_matrix(5, 3, &mut rng);
        let got = a.matmul(&b).unwrap();
        let want = naive_matmul(&a, &b);
        let diff = got.data().iter().zip(&want).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-12);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(SnipError::Shape(_))));
    }

    #[test]
    fn matmul_matches_oracle_on_random_instances() {
        let mut rng = RngStream::new(5).generator();
        for _ in 0..100 {
            let m = rng.random_range(1..=16);
            let k = rng.random_range(1..=16);
            let n = rng.random_range(1..=16);
            let a = random_matrix(m, k, &mut rng);
            let b = random_matrix(k, n, &mut rng);
            let got = a.matmul(&b).unwrap();
            for (x, y) in got.data().iter().zip(naive_matmul(&a, &b)) {
                assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
            }
            // Transposed variants agree with explicit transposes.
            let bt = b.transpose().unwrap();
            let nt = a.matmul_nt(&bt).unwrap();
            assert_eq!(nt, got);
            let at = a.transpose().unwrap();
            let tn = at.matmul_tn(&b).unwrap();
            for (x, y) in tn.data().iter().zip(got.data()) {
                assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
            }
        }
    }

    #[test]
    fn gaussian_examples() {
        let s = RngStream::with_stream(3, 9);
        let a = sample_gaussian(&[4, 4], 0.5, &s).unwrap();
        let b = sample_gaussian(&[4, 4], 0.5, &s).unwrap();
        assert_eq!(a, b);
        assert!(sample_gaussian(&[4], 0.0, &s).is_err());
        assert!(sample_gaussian(&[4], -1.0, &s).is_err());
    }

    #[test]
    fn gaussian_norm_concentrates() {
        // sigma = 1e-3, d = 10000: ||delta|| lies in [0.09, 0.11] in essentially
        // every trial (chi-square with 1e4 dof has relative sd ~0.7%).
        let mut inside = 0;
        for trial in 0..1000 {
            let t = sample_gaussian(&[10000], 1e-3, &RngStream::with_stream(17, trial)).unwrap();
            let n = t.norm();
            if (0.9 * 0.1..=1.1 * 0.1).contains(&n) {
                inside += 1;
            }
        }
        assert!(inside >= 990, "{inside}");
    }

    #[test]
    fn gaussian_mean_and_variance() {
        let n = 100_000;
        let sigma = 2.0;
        let t = sample_gaussian(&[n], sigma, &RngStream::new(99)).unwrap();
        let mean = t.data().iter().sum::<f64>() / n as f64;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        assert!(mean.abs() <= 4.0 * sigma / (n as f64).sqrt(), "mean {mean}");
        assert!((var / (sigma * sigma) - 1.0).abs() <= 0.1, "var {var}");
    }

    #[test]
    fn container_layout() {
        let t = Tensor::from_vec(&[2, 1], vec![1.5, -2.0]).unwrap();
        let bytes = t.to_container_bytes();
        assert_eq!(&bytes[..5], b"SNIPT");
        assert_eq!(&bytes[5..9], &1u32.to_le_bytes());
        assert_eq!(&bytes[9..13], &2u32.to_le_bytes());
        assert_eq!(&bytes[13..21], &2u64.to_le_bytes());
        assert_eq!(&bytes[21..29], &1u64.to_le_bytes());
        assert_eq!(&bytes[29..37], &1.5f64.to_le_bytes());
        assert_eq!(bytes.len(), 45);
        assert!(Tensor::read_container(&b"SNIPX"[..]).is_err());
    }

    proptest! {
        #[test]
        fn triangle_inequality(a in proptest::collection::vec(-1e3..1e3f64, 12), b in proptest::collection::vec(-1e3..1e3f64, 12)) {
            let ta = Tensor::from_vec(&[3, 4], a).unwrap();
            let tb = Tensor::from_vec(&[3, 4], b).unwrap();
            let lhs = ta.add(&tb).unwrap().norm();
            prop_assert!(lhs <= ta.norm() + tb.norm() + 1e-9);
        }

        #[test]
        fn container_round_trip(rows in 1usize..5, cols in 1usize..5, seed in any::<u64>()) {
            let mut rng = RngStream::new(seed).generator();
            let t = random_matrix(rows, cols, &mut rng);
            let back = Tensor::read_container(&t.to_container_bytes()[..]).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
