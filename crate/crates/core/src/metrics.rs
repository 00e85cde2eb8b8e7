//! Measurements taken during and after training.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::batch::{attend, evaluate, Batch};
use crate::embeddings::ModelParams;
use crate::error::{Error, Result};
use crate::model::{self, Activation, LabeledExample, Prompt};
use crate::scalar::Scalar;

/// Cosine similarity of two vectors.
pub fn cosine<T: Scalar>(a: ArrayView1<'_, T>, b: ArrayView1<'_, T>) -> Result<T> {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if !(na > T::zero() && nb > T::zero()) {
        return Err(Error::UndefinedSimilarity);
    }
    let c = a.dot(&b) / (na * nb);
    Ok(c.max(-T::one()).min(T::one()))
}

/// `cos(V u, V w)`.
pub fn feature_similarity<T: Scalar>(v: ArrayView2<'_, T>, u: ArrayView1<'_, T>, w: ArrayView1<'_, T>) -> Result<T> {
    let vu = v.dot(&u);
    let vw = v.dot(&w);
    cosine(vu.view(), vw.view())
}

/// Mean and sample standard deviation (zero for fewer than two values).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

/// Per-pair feature similarities for token-id pairs of `table`.
pub fn pair_similarities<T: Scalar>(
    v: ArrayView2<'_, T>,
    tokens: &Array2<T>,
    pairs: &[(usize, usize)],
) -> Result<Vec<f64>> {
    pairs
        .iter()
        .map(|&(a, b)| feature_similarity(v, tokens.row(a), tokens.row(b)).map(Scalar::as_f64))
        .collect()
}

/// Logit margins `f_y - max_{k != y} f_k` for every example.
pub fn margins<T: Scalar>(
    params: &ModelParams<T>,
    examples: &[LabeledExample<T>],
    activation: Activation,
) -> Result<Vec<T>> {
    let batch = Batch::from_examples(examples)?;
    let fmap = params.feature_map();
    let att = attend(params, &batch);
    let ev = evaluate(params, &fmap, &att, &batch, activation);
    Ok(batch
        .labels
        .iter()
        .enumerate()
        .map(|(e, &y)| model::margin(ev.logits.column(e), y))
        .collect())
}

/// Fraction of examples whose labelled logit does not strictly exceed all
/// others.
pub fn zero_one_error<T: Scalar>(
    params: &ModelParams<T>,
    test_set: &[LabeledExample<T>],
    activation: Activation,
) -> Result<f64> {
    if test_set.is_empty() {
        return Err(Error::EmptySet);
    }
    Ok(error_from_margins(&margins(params, test_set, activation)?))
}

pub fn error_from_margins<T: Scalar>(margins: &[T]) -> f64 {
    let wrong = margins.iter().filter(|&&g| !(g > T::zero())).count();
    wrong as f64 / margins.len() as f64
}

/// `alpha_1 / alpha_2`, evaluated as the exponential of the score gap.
pub fn attention_balance<T: Scalar>(z: ArrayView2<'_, T>, prompt: &Prompt<T>) -> Result<T> {
    let d = prompt.dim();
    if z.dim() != (d, d) {
        return Err(Error::Shape(format!("Z is {:?} for tokens of length {d}", z.dim())));
    }
    let zq = z.dot(prompt.last());
    let gap = (prompt.first().dot(&zq) - prompt.last().dot(&zq)) / T::count(d).sqrt();
    Ok(gap.exp())
}

/// Orthonormal basis of the span of a set of vectors.
#[derive(Debug, Clone)]
pub struct SpanProjector<T> {
    basis: Vec<Array1<T>>,
    dim: usize,
}

impl<T: Scalar> SpanProjector<T> {
    /// Gram-Schmidt with one re-orthogonalization pass; vectors whose
    /// remainder falls below `rank_tol` times their norm are dropped.
    pub fn from_vectors<'a, I>(vectors: I, dim: usize, rank_tol: T) -> Self
    where
        I: IntoIterator<Item = ArrayView1<'a, T>>,
    {
        let mut basis: Vec<Array1<T>> = Vec::new();
        for v in vectors {
            if basis.len() == dim {
                break;
            }
            let norm0 = v.dot(&v).sqrt();
            if !(norm0 > T::zero()) {
                continue;
            }
            let mut r = v.to_owned();
            for _ in 0..2 {
                for q in &basis {
                    let c = r.dot(q);
                    r.scaled_add(-c, q);
                }
            }
            let norm = r.dot(&r).sqrt();
            if norm > rank_tol * norm0 {
                basis.push(r / norm);
            }
        }
        Self { basis, dim }
    }

    /// Span of all initial feature vectors `w_{k,l}`.
    pub fn from_feature_layer(w: &Array3<T>) -> Self {
        let (d, m, dd) = w.dim();
        let flat = w.view().into_shape_with_order((d * m, dd)).expect("contiguous W");
        Self::from_vectors(flat.axis_iter(Axis(0)), dd, T::lit(1e-10))
    }

    pub fn rank(&self) -> usize {
        self.basis.len()
    }

    pub fn is_full(&self) -> bool {
        self.basis.len() == self.dim
    }

    pub fn project(&self, r: ArrayView1<'_, T>) -> Array1<T> {
        let mut p = Array1::zeros(r.len());
        for q in &self.basis {
            p.scaled_add(r.dot(q), q);
        }
        p
    }

    /// `||r - P r|| / max(||r||, 1e-30)`.
    pub fn relative_residual(&self, r: ArrayView1<'_, T>) -> T {
        let rest = &r - &self.project(r);
        let eps = T::lit(1e-30);
        rest.dot(&rest).sqrt() / r.dot(&r).sqrt().max(eps)
    }
}

/// Relative part of `(V_t - V_0) token` lying outside the span of the
/// feature vectors in `w0`.
pub fn span_residual<T: Scalar>(
    v_t: ArrayView2<'_, T>,
    v_0: ArrayView2<'_, T>,
    w0: &Array3<T>,
    token: ArrayView1<'_, T>,
) -> T {
    let projector = SpanProjector::from_feature_layer(w0);
    let r = (&v_t - &v_0).dot(&token);
    projector.relative_residual(r.view())
}

/// Measurements recorded at a logging point or stage boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSnapshot {
    /// Global iteration count when the snapshot was taken.
    pub when: usize,
    pub phase: usize,
    pub stage: usize,
    pub feature_sim: MeanStd,
    /// Smallest and largest `alpha_1 / alpha_2` over the training prompts.
    pub attention_ratio_min: f64,
    pub attention_ratio_max: f64,
    /// Largest span residual over tracked tokens, when tracked.
    pub span_residual: Option<f64>,
    pub test_error: Option<f64>,
}

impl MetricSnapshot {
    /// `max |ratio - 1|` over the training prompts.
    pub fn attention_balance(&self) -> f64 {
        (self.attention_ratio_max - 1.0).abs().max((1.0 - self.attention_ratio_min).abs())
    }
}
