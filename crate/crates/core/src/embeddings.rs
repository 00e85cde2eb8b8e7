//! Frozen token embeddings and Gaussian parameter initialization.
//!
//! All randomness flows through [`SeededRng`], a ChaCha8 stream keyed by a
//! `u64` seed. Standard normals come from `rand_distr`'s ziggurat sampler and
//! are drawn in `f64` before conversion, so a given seed produces the same
//! draws for every scalar type.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Deterministic random source used throughout the crate.
pub type SeededRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub(crate) fn gaussian<T: Scalar>(rng: &mut SeededRng, sigma: f64) -> T {
    let z: f64 = StandardNormal.sample(rng);
    T::lit(z * sigma)
}

/// Orthonormal token vectors, one row per token, addressable by name.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable<T> {
    vectors: Array2<T>,
    names: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl<T: Scalar> EmbeddingTable<T> {
    /// Wraps precomputed rows. Names default to `t0, t1, ...`.
    pub fn from_rows(vectors: Array2<T>) -> Result<Self> {
        let count = vectors.nrows();
        if count == 0 {
            return Err(Error::EmptyTable);
        }
        if count > vectors.ncols() {
            return Err(Error::DimensionExceeded { count, dim: vectors.ncols() });
        }
        let names: Vec<String> = (0..count).map(|i| format!("t{i}")).collect();
        let index = names.iter().cloned().enumerate().map(|(i, n)| (n, i)).collect();
        Ok(Self { vectors, names, index })
    }

    /// Replaces the generated names. The slice must have one entry per row.
    pub fn with_names<S: AsRef<str>>(mut self, names: &[S]) -> Result<Self> {
        if names.len() != self.len() {
            return Err(Error::Shape(format!(
                "{} names for {} vectors",
                names.len(),
                self.len()
            )));
        }
        self.names = names.iter().map(|s| s.as_ref().to_owned()).collect();
        self.index = self.names.iter().cloned().enumerate().map(|(i, n)| (n, i)).collect();
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }

    pub fn vector(&self, id: usize) -> ArrayView1<'_, T> {
        self.vectors.row(id)
    }

    pub fn vectors(&self) -> &Array2<T> {
        &self.vectors
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Largest deviation of the Gram matrix from the identity.
    pub fn orthonormality_defect(&self) -> T {
        let gram = self.vectors.dot(&self.vectors.t());
        let mut worst = T::zero();
        for ((i, j), &g) in gram.indexed_iter() {
            let target = if i == j { T::one() } else { T::zero() };
            worst = worst.max((g - target).abs());
        }
        worst
    }
}

/// Orthonormalizes the rows of `rows` in place with two passes of modified
/// Gram-Schmidt. Fails when a row is numerically dependent on earlier ones.
pub fn orthonormalize_rows<T: Scalar>(rows: &mut Array2<T>) -> Result<()> {
    let count = rows.nrows();
    for _pass in 0..2 {
        for i in 0..count {
            for j in 0..i {
                let (done, mut rest) = rows.view_mut().split_at(Axis(0), i);
                let qj = done.row(j);
                let mut vi = rest.row_mut(0);
                let proj = vi.dot(&qj);
                vi.scaled_add(-proj, &qj);
            }
            let mut vi = rows.row_mut(i);
            let norm = vi.dot(&vi).sqrt();
            if !(norm > T::epsilon()) {
                return Err(Error::Parameter {
                    name: "rows",
                    reason: format!("row {i} is linearly dependent"),
                });
            }
            vi.mapv_inplace(|x| x / norm);
        }
    }
    Ok(())
}

/// Draws `count` vectors forming a uniformly random orthonormal frame in
/// R^`dim` by orthonormalizing i.i.d. standard Gaussian rows.
pub fn sample_orthonormal_system<T: Scalar>(
    count: usize,
    dim: usize,
    rng: &mut SeededRng,
) -> Result<EmbeddingTable<T>> {
    if count == 0 {
        return Err(Error::EmptyTable);
    }
    if count > dim {
        return Err(Error::DimensionExceeded { count, dim });
    }
    let mut rows = Array2::from_shape_simple_fn((count, dim), || gaussian::<T>(rng, 1.0));
    orthonormalize_rows(&mut rows)?;
    EmbeddingTable::from_rows(rows)
}

/// Trainable parameters of the one-block model.
///
/// `w` has shape `(d, m, d)`: `w[[k, l, ..]]` is the feature vector
/// `w_{k,l}` feeding output class `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams<T> {
    pub z: Array2<T>,
    pub v: Array2<T>,
    pub w: Array3<T>,
    pub lambda: T,
}

impl<T: Scalar> ModelParams<T> {
    pub fn dim(&self) -> usize {
        self.z.nrows()
    }

    pub fn width(&self) -> usize {
        self.w.len_of(Axis(1))
    }

    /// All-zero parameters of the given shape.
    pub fn zeros(dim: usize, m: usize, lambda: T) -> Self {
        Self {
            z: Array2::zeros((dim, dim)),
            v: Array2::zeros((dim, dim)),
            w: Array3::zeros((dim, m, dim)),
            lambda,
        }
    }

    /// Class-averaged feature map: row `k` is `(1/m) sum_l w_{k,l}`.
    pub fn feature_map(&self) -> Array2<T> {
        self.w.mean_axis(Axis(1)).expect("feature width is positive")
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.z.nrows();
        let (wd, m, wd2) = self.w.dim();
        if self.z.dim() != (d, d) || self.v.dim() != (d, d) || wd != d || wd2 != d || m == 0 {
            return Err(Error::Shape(format!(
                "Z {:?}, V {:?}, W {:?}",
                self.z.dim(),
                self.v.dim(),
                self.w.dim()
            )));
        }
        if !self.all_finite() {
            return Err(Error::Parameter { name: "params", reason: "non-finite entry".into() });
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.z.iter().chain(self.v.iter()).chain(self.w.iter()).all(|x| x.is_finite())
            && self.lambda.is_finite()
    }

    /// Value-space image `V x` of a token vector.
    pub fn value_image(&self, token: ArrayView1<'_, T>) -> Array1<T> {
        self.v.dot(&token)
    }
}

/// Draws every entry of Z, V and W i.i.d. from N(0, sigma0^2), in that order.
pub fn init_params<T: Scalar>(
    dim: usize,
    m: usize,
    lambda: T,
    sigma0: f64,
    rng: &mut SeededRng,
) -> Result<ModelParams<T>> {
    if dim == 0 {
        return Err(Error::Parameter { name: "dim", reason: "must be at least 1".into() });
    }
    if m == 0 {
        return Err(Error::Parameter { name: "m", reason: "must be at least 1".into() });
    }
    if !(sigma0 > 0.0) || !sigma0.is_finite() {
        return Err(Error::Parameter { name: "sigma0", reason: format!("{sigma0} is not positive") });
    }
    if !(lambda > T::zero()) {
        return Err(Error::Parameter { name: "lambda", reason: "must be positive".into() });
    }
    let z = Array2::from_shape_simple_fn((dim, dim), || gaussian::<T>(rng, sigma0));
    let v = Array2::from_shape_simple_fn((dim, dim), || gaussian::<T>(rng, sigma0));
    let w = Array3::from_shape_simple_fn((dim, m, dim), || gaussian::<T>(rng, sigma0));
    Ok(ModelParams { z, v, w, lambda })
}
