//! Layer-wise training of deep linear networks on orthonormal inputs.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::embeddings::{sample_orthonormal_system, SeededRng};
use crate::error::{Error, Result};
use crate::metrics::{cosine, MeanStd};
use crate::scalar::Scalar;

/// `W_1, ..., W_L`, applied in that order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearStack<T> {
    pub layers: Vec<Array2<T>>,
}

impl<T: Scalar> LinearStack<T> {
    pub fn identity(dim: usize, depth: usize) -> Self {
        Self { layers: vec![Array2::eye(dim); depth] }
    }

    pub fn from_layers(layers: Vec<Array2<T>>) -> Result<Self> {
        let Some(first) = layers.first() else {
            return Err(Error::Parameter { name: "layers", reason: "stack is empty".into() });
        };
        let d = first.nrows();
        if layers.iter().any(|w| w.dim() != (d, d)) {
            return Err(Error::Shape("layers must all be d x d".into()));
        }
        if layers.iter().any(|w| w.iter().any(|x| !x.is_finite())) {
            return Err(Error::Parameter { name: "layers", reason: "non-finite entry".into() });
        }
        Ok(Self { layers })
    }

    pub fn dim(&self) -> usize {
        self.layers[0].nrows()
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// `W_k ... W_1 X` for the columns of `x`.
    pub fn partial_product(&self, x: &Array2<T>, upto: usize) -> Result<Array2<T>> {
        if upto > self.depth() {
            return Err(Error::DepthOutOfRange { depth: upto, layers: self.depth() });
        }
        let mut h = x.clone();
        for w in &self.layers[..upto] {
            h = w.dot(&h);
        }
        Ok(h)
    }

    /// `W_L ... W_{from}` (1-based, inclusive); identity when `from > L`.
    fn product_from(&self, from: usize) -> Array2<T> {
        let d = self.dim();
        let mut p = Array2::eye(d);
        for w in &self.layers[from - 1..] {
            p = w.dot(&p);
        }
        p
    }
}

/// `W_k ... W_1 x`; depth 0 returns `x`.
pub fn forward_stack<T: Scalar>(stack: &LinearStack<T>, x: ArrayView1<'_, T>, upto: usize) -> Result<Array1<T>> {
    if upto > stack.depth() {
        return Err(Error::DepthOutOfRange { depth: upto, layers: stack.depth() });
    }
    if x.len() != stack.dim() {
        return Err(Error::Shape(format!("input of length {} for d = {}", x.len(), stack.dim())));
    }
    let mut h = x.to_owned();
    for w in &stack.layers[..upto] {
        h = w.dot(&h);
    }
    Ok(h)
}

/// Orthonormal inputs (columns of `inputs`) with class labels.
#[derive(Debug, Clone)]
pub struct OrthogonalDataset<T> {
    pub inputs: Array2<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> OrthogonalDataset<T> {
    /// `n` random orthonormal inputs; sample `i` gets label `i / 2`.
    pub fn paired(n: usize, dim: usize, rng: &mut SeededRng) -> Result<Self> {
        if n > dim {
            return Err(Error::Capacity { needed: n, dim });
        }
        if n == 0 {
            return Err(Error::EmptySet);
        }
        let table = sample_orthonormal_system::<T>(n, dim, rng)?;
        let inputs = table.vectors().t().to_owned();
        Ok(Self { inputs, labels: (0..n).map(|i| i / 2).collect() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Index pairs `(i, j)`, `i < j`, sharing a label.
    pub fn same_label_pairs(&self) -> Vec<(usize, usize)> {
        let n = self.len();
        let mut out = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if self.labels[i] == self.labels[j] {
                    out.push((i, j));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeepLinearConfig {
    pub dim: usize,
    pub depth: usize,
    pub samples: usize,
    pub eta: f64,
    /// Iterations per trained layer; `None` uses `round(n / (eta L))`.
    pub iterations: Option<usize>,
}

impl Default for DeepLinearConfig {
    fn default() -> Self {
        Self { dim: 512, depth: 6, samples: 32, eta: 0.5, iterations: None }
    }
}

impl DeepLinearConfig {
    pub fn iterations_per_layer(&self) -> usize {
        self.iterations
            .unwrap_or_else(|| (self.samples as f64 / (self.eta * self.depth as f64)).round() as usize)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthPoint {
    pub depth: usize,
    pub sim: MeanStd,
}

#[derive(Debug, Clone)]
pub struct DeepLinearRun<T> {
    pub stack: LinearStack<T>,
    /// Same-label similarity at depths `0..L-1`.
    pub curve: Vec<DepthPoint>,
    /// Training loss at the end of each stage.
    pub stage_losses: Vec<f64>,
}

/// Mean/std over same-label pairs of the cosine between representations.
pub fn same_label_similarity<T: Scalar>(reps: &Array2<T>, pairs: &[(usize, usize)]) -> Result<MeanStd> {
    let sims = pairs
        .iter()
        .map(|&(i, j)| cosine(reps.column(i), reps.column(j)).map(Scalar::as_f64))
        .collect::<Result<Vec<_>>>()?;
    Ok(MeanStd::of(&sims))
}

/// Mean cross-entropy of `softmax(A W B)` columns and its residual
/// `(P - E_y) / n`.
fn loss_and_residual<T: Scalar>(logits: &Array2<T>, labels: &[usize]) -> (T, Array2<T>) {
    let n = T::count(labels.len());
    let mut resid = logits.clone();
    let mut total = T::zero();
    for (e, mut col) in resid.axis_iter_mut(Axis(1)).enumerate() {
        let mx = col.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        col.mapv_inplace(|x| {
            let y = (x - mx).exp();
            z += y;
            y
        });
        col.mapv_inplace(|x| x / z / n);
        total += mx + z.ln() - logits[[labels[e], e]];
        col[labels[e]] -= T::one() / n;
    }
    (total / n, resid)
}

/// Trains layers `1..L-1` one at a time from identity initialization; the
/// last layer stays at the identity.
pub fn train_layerwise_linear<T: Scalar>(
    config: &DeepLinearConfig,
    rng: &mut SeededRng,
) -> Result<DeepLinearRun<T>> {
    let DeepLinearConfig { dim, depth, samples, eta, .. } = *config;
    if depth < 2 {
        return Err(Error::Parameter { name: "depth", reason: "need at least two layers".into() });
    }
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::Parameter { name: "eta", reason: format!("{eta} is not positive") });
    }
    let data = OrthogonalDataset::<T>::paired(samples, dim, rng)?;
    if data.labels.iter().any(|&y| y >= dim) {
        return Err(Error::Capacity { needed: samples / 2 + 1, dim });
    }
    let pairs = data.same_label_pairs();
    let steps = config.iterations_per_layer();
    let eta_t = T::lit(eta);
    let mut stack = LinearStack::identity(dim, depth);
    let mut curve = vec![DepthPoint { depth: 0, sim: same_label_similarity(&data.inputs, &pairs)? }];
    let mut stage_losses = Vec::with_capacity(depth - 1);

    for layer in 1..depth {
        let below = stack.partial_product(&data.inputs, layer - 1)?;
        let above = stack.product_from(layer + 1);
        let mut loss = T::zero();
        for _ in 0..steps {
            let logits = above.dot(&stack.layers[layer - 1].dot(&below));
            let (l, resid) = loss_and_residual(&logits, &data.labels);
            loss = l;
            let grad = above.t().dot(&resid).dot(&below.t());
            stack.layers[layer - 1].scaled_add(-eta_t, &grad);
        }
        let logits = above.dot(&stack.layers[layer - 1].dot(&below));
        let final_loss = loss_and_residual(&logits, &data.labels).0;
        log::debug!("layer {layer}: loss {:.6} -> {:.6}", loss.as_f64(), final_loss.as_f64());
        stage_losses.push(final_loss.as_f64());
        let reps = stack.partial_product(&data.inputs, layer)?;
        curve.push(DepthPoint { depth: layer, sim: same_label_similarity(&reps, &pairs)? });
    }
    Ok(DeepLinearRun { stack, curve, stage_losses })
}
