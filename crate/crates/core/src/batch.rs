//! Full-batch evaluation of the one-block model as dense matrix products.
//!
//! Distinct examples are stacked as columns; multiplicities become column
//! weights that sum to one, so the returned gradients are gradients of the
//! multiset-average loss.

use ndarray::{Array1, Array2, Array3, Axis, Zip};

use crate::datasets::TrainMultiset;
use crate::embeddings::ModelParams;
use crate::error::{Error, Result};
use crate::model::{Activation, Gradients, Groups, LabeledExample};
use crate::scalar::Scalar;

/// Stacked prompts: column `e` of `first`/`last` holds example `e`'s tokens.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub first: Array2<T>,
    pub last: Array2<T>,
    pub labels: Vec<usize>,
    pub weights: Array1<T>,
    pub effective_size: usize,
}

impl<T: Scalar> Batch<T> {
    pub fn from_weighted<'a, I>(items: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a LabeledExample<T>, usize)>,
    {
        let items: Vec<_> = items.into_iter().collect();
        let Some((head, _)) = items.first() else {
            return Err(Error::EmptySet);
        };
        let d = head.prompt.dim();
        let u = items.len();
        let mut first = Array2::zeros((d, u));
        let mut last = Array2::zeros((d, u));
        let mut labels = Vec::with_capacity(u);
        let total: usize = items.iter().map(|(_, k)| *k).sum();
        let mut weights = Array1::zeros(u);
        for (e, (ex, k)) in items.iter().enumerate() {
            if ex.prompt.dim() != d {
                return Err(Error::Shape("examples of mixed dimension".into()));
            }
            if ex.label >= d {
                return Err(Error::LabelOutOfRange { label: ex.label, classes: d });
            }
            first.column_mut(e).assign(ex.prompt.first());
            last.column_mut(e).assign(ex.prompt.last());
            labels.push(ex.label);
            weights[e] = T::count(*k) / T::count(total);
        }
        Ok(Self { first, last, labels, weights, effective_size: total })
    }

    pub fn from_multiset(set: &TrainMultiset<T>) -> Result<Self> {
        Self::from_weighted(set.iter_weighted())
    }

    pub fn from_examples(examples: &[LabeledExample<T>]) -> Result<Self> {
        Self::from_weighted(examples.iter().map(|e| (e, 1)))
    }

    pub fn dim(&self) -> usize {
        self.first.nrows()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Attention-side quantities; these depend on `Z` and `V` only.
#[derive(Debug, Clone)]
pub struct Attended<T> {
    pub alpha_first: Array1<T>,
    pub alpha_last: Array1<T>,
    pub mixed: Array2<T>,
    pub value_out: Array2<T>,
}

pub fn attend<T: Scalar>(params: &ModelParams<T>, batch: &Batch<T>) -> Attended<T> {
    let scale = T::count(batch.dim()).sqrt();
    let zq = params.z.dot(&batch.last);
    let s_first = (&batch.first * &zq).sum_axis(Axis(0)) / scale;
    let s_last = (&batch.last * &zq).sum_axis(Axis(0)) / scale;
    let mut alpha_first = Array1::zeros(batch.len());
    let mut alpha_last = Array1::zeros(batch.len());
    Zip::from(&mut alpha_first)
        .and(&mut alpha_last)
        .and(&s_first)
        .and(&s_last)
        .for_each(|a1, a2, &s1, &s2| {
            let mx = s1.max(s2);
            let e1 = (s1 - mx).exp();
            let e2 = (s2 - mx).exp();
            *a1 = e1 / (e1 + e2);
            *a2 = e2 / (e1 + e2);
        });
    let mixed = &batch.first * &alpha_first.view().insert_axis(Axis(0))
        + &batch.last * &alpha_last.view().insert_axis(Axis(0));
    let value_out = params.v.dot(&mixed);
    Attended { alpha_first, alpha_last, mixed, value_out }
}

/// Logits and per-example losses.
#[derive(Debug, Clone)]
pub struct Evaluated<T> {
    /// ReLU pre-activations, `(d*m) x u`; absent in identity mode.
    pub pre: Option<Array2<T>>,
    pub logits: Array2<T>,
    pub probs: Array2<T>,
    pub losses: Array1<T>,
}

impl<T: Scalar> Evaluated<T> {
    pub fn weighted_loss(&self, batch: &Batch<T>) -> T {
        self.losses.dot(&batch.weights)
    }

    pub fn max_abs_logit(&self) -> T {
        self.logits.iter().fold(T::zero(), |a, &x| a.max(x.abs()))
    }
}

pub fn evaluate<T: Scalar>(
    params: &ModelParams<T>,
    feature_map: &Array2<T>,
    att: &Attended<T>,
    batch: &Batch<T>,
    activation: Activation,
) -> Evaluated<T> {
    let d = batch.dim();
    let m = params.width();
    let u = batch.len();
    let (pre, logits) = match activation {
        Activation::Identity => (None, feature_map.dot(&att.value_out) * params.lambda),
        Activation::Relu => {
            let w_flat = params.w.view().into_shape_with_order((d * m, d)).expect("contiguous W");
            let pre = w_flat.dot(&att.value_out);
            let scale = params.lambda / T::count(m);
            let mut logits = Array2::zeros((d, u));
            for (k, block) in pre.axis_chunks_iter(Axis(0), m).enumerate() {
                let mut row = logits.row_mut(k);
                for neuron in block.axis_iter(Axis(0)) {
                    Zip::from(&mut row).and(&neuron).for_each(|acc, &h| *acc += h.max(T::zero()));
                }
                row.mapv_inplace(|x| x * scale);
            }
            (Some(pre), logits)
        }
    };
    let mut probs = logits.clone();
    let mut losses = Array1::zeros(u);
    for (e, mut col) in probs.axis_iter_mut(Axis(1)).enumerate() {
        let mx = col.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        col.mapv_inplace(|x| {
            let y = (x - mx).exp();
            total += y;
            y
        });
        col.mapv_inplace(|x| x / total);
        losses[e] = mx + total.ln() - logits[[batch.labels[e], e]];
    }
    Evaluated { pre, logits, probs, losses }
}

/// Feature-layer gradient. In identity mode every `w_{k,l}` with the same
/// `k` receives the same gradient, stored once as a `d x d` matrix.
#[derive(Debug, Clone)]
pub enum FeatureGrad<T> {
    Shared(Array2<T>),
    PerNeuron(Array3<T>),
}

#[derive(Debug, Clone, Default)]
pub struct BatchGrads<T> {
    pub z: Option<Array2<T>>,
    pub v: Option<Array2<T>>,
    pub w: Option<FeatureGrad<T>>,
}

impl<T: Scalar> BatchGrads<T> {
    pub fn all_finite(&self) -> bool {
        let finite = |a: &Array2<T>| a.iter().all(|x| x.is_finite());
        self.z.as_ref().is_none_or(finite)
            && self.v.as_ref().is_none_or(finite)
            && match &self.w {
                None => true,
                Some(FeatureGrad::Shared(g)) => finite(g),
                Some(FeatureGrad::PerNeuron(g)) => g.iter().all(|x| x.is_finite()),
            }
    }

    /// Expands to the per-parameter layout of [`Gradients`].
    pub fn expand(&self, m: usize) -> Gradients<T> {
        let w = self.w.as_ref().map(|g| match g {
            FeatureGrad::PerNeuron(g) => g.clone(),
            FeatureGrad::Shared(g) => {
                let (d, dd) = g.dim();
                let mut out = Array3::zeros((d, m, dd));
                out.assign(&g.view().insert_axis(Axis(1)));
                out
            }
        });
        Gradients { z: self.z.clone(), v: self.v.clone(), w }
    }
}

pub fn gradients<T: Scalar>(
    params: &ModelParams<T>,
    feature_map: &Array2<T>,
    att: &Attended<T>,
    eval: &Evaluated<T>,
    batch: &Batch<T>,
    groups: Groups,
    activation: Activation,
) -> BatchGrads<T> {
    let d = batch.dim();
    let m = params.width();
    let lambda = params.lambda;
    let per_neuron = lambda / T::count(m);

    // weighted residual (logit - e_y)
    let mut resid = eval.probs.clone();
    for (e, &y) in batch.labels.iter().enumerate() {
        resid[[y, e]] -= T::one();
    }
    resid *= &batch.weights.view().insert_axis(Axis(0));

    let mut out = BatchGrads::default();
    let need_upstream = groups.v || groups.z;
    let upstream = match activation {
        Activation::Identity => {
            if groups.w {
                out.w = Some(FeatureGrad::Shared(resid.dot(&att.value_out.t()) * per_neuron));
            }
            need_upstream.then(|| feature_map.t().dot(&resid) * lambda)
        }
        Activation::Relu => {
            let pre = eval.pre.as_ref().expect("relu evaluation keeps pre-activations");
            let mut gated = pre.clone();
            for (k, mut block) in gated.axis_chunks_iter_mut(Axis(0), m).enumerate() {
                let r = resid.row(k);
                for mut neuron in block.axis_iter_mut(Axis(0)) {
                    Zip::from(&mut neuron).and(&r).for_each(|h, &rk| {
                        *h = if *h > T::zero() { rk * per_neuron } else { T::zero() };
                    });
                }
            }
            if groups.w {
                // a one-column batch can come back column-major
                let g = gated.dot(&att.value_out.t()).as_standard_layout().into_owned();
                out.w = Some(FeatureGrad::PerNeuron(
                    g.into_shape_with_order((d, m, d)).expect("d*m*d gradient"),
                ));
            }
            need_upstream.then(|| {
                let w_flat = params.w.view().into_shape_with_order((d * m, d)).expect("contiguous W");
                w_flat.t().dot(&gated)
            })
        }
    };

    if let Some(up) = upstream {
        if groups.v {
            out.v = Some(up.dot(&att.mixed.t()));
        }
        if groups.z {
            // dL/d(alpha_j) = <V^T up, x_j>; the 2x2 softmax Jacobian collapses
            // to a1*a2*(p1 - p2) on the score difference.
            let back = params.v.t().dot(&up);
            let p_first = (&back * &batch.first).sum_axis(Axis(0));
            let p_last = (&back * &batch.last).sum_axis(Axis(0));
            let coef = (&p_first - &p_last) * &att.alpha_first * &att.alpha_last / T::count(d).sqrt();
            let diff = &batch.first - &batch.last;
            let scaled = diff * coef.view().insert_axis(Axis(0));
            out.z = Some(scaled.dot(&batch.last.t()));
        }
    }
    out
}

/// Applies `params -= eta * grad` to the groups present in `grads`.
pub fn apply_update<T: Scalar>(params: &mut ModelParams<T>, grads: &BatchGrads<T>, eta: T) {
    if let Some(g) = &grads.z {
        params.z.scaled_add(-eta, g);
    }
    if let Some(g) = &grads.v {
        params.v.scaled_add(-eta, g);
    }
    match &grads.w {
        None => {}
        Some(FeatureGrad::Shared(g)) => {
            let step = g * eta;
            params.w -= &step.view().insert_axis(Axis(1));
        }
        Some(FeatureGrad::PerNeuron(g)) => params.w.scaled_add(-eta, g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{assemble_train, build_analogical, Recipe};
    use crate::embeddings::{init_params, seeded_rng};
    use crate::model;

    fn per_example_sum(
        params: &ModelParams<f64>,
        set: &TrainMultiset<f64>,
        act: Activation,
    ) -> (f64, Gradients<f64>) {
        let d = params.dim();
        let m = params.width();
        let n = set.effective_size() as f64;
        let mut z = Array2::zeros((d, d));
        let mut v = Array2::zeros((d, d));
        let mut w = Array3::zeros((d, m, d));
        let mut total = 0.0;
        for (ex, k) in set.iter_weighted() {
            let wt = k as f64 / n;
            total += wt * model::loss(params, ex, act).unwrap();
            let g = model::grads(params, ex, Groups::ALL, act).unwrap();
            z.scaled_add(wt, g.z.as_ref().unwrap());
            v.scaled_add(wt, g.v.as_ref().unwrap());
            w.scaled_add(wt, g.w.as_ref().unwrap());
        }
        (total, Gradients { z: Some(z), v: Some(v), w: Some(w) })
    }

    fn max_diff<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>, b: &ndarray::Array<f64, D>) -> f64 {
        a.iter().zip(b.iter()).fold(0.0, |acc, (x, y)| acc.max((x - y).abs()))
    }

    #[test]
    fn batched_path_matches_per_example_lemma() {
        for act in [Activation::Identity, Activation::Relu] {
            let mut rng = seeded_rng(17);
            let corpus = build_analogical::<f64>(3, 12, &mut rng).unwrap();
            let params = init_params::<f64>(12, 3, 5.0, 0.4, &mut rng).unwrap();
            let set = assemble_train(&corpus, Recipe::JointAnalogical, 2).unwrap();
            let batch = Batch::from_multiset(&set).unwrap();
            let fmap = params.feature_map();
            let att = attend(&params, &batch);
            let ev = evaluate(&params, &fmap, &att, &batch, act);
            let g = gradients(&params, &fmap, &att, &ev, &batch, Groups::ALL, act).expand(3);
            let (want_loss, want) = per_example_sum(&params, &set, act);
            assert!((ev.weighted_loss(&batch) - want_loss).abs() < 1e-12);
            assert!(max_diff(g.z.as_ref().unwrap(), want.z.as_ref().unwrap()) < 1e-12);
            assert!(max_diff(g.v.as_ref().unwrap(), want.v.as_ref().unwrap()) < 1e-12);
            assert!(max_diff(g.w.as_ref().unwrap(), want.w.as_ref().unwrap()) < 1e-12);
        }
    }

    #[test]
    fn weights_sum_to_one() {
        let mut rng = seeded_rng(2);
        let corpus = build_analogical::<f64>(4, 12, &mut rng).unwrap();
        let set = assemble_train(&corpus, Recipe::JointAnalogical, 3).unwrap();
        let batch = Batch::from_multiset(&set).unwrap();
        assert_eq!(batch.len(), 12);
        assert_eq!(batch.effective_size, 28);
        assert!((batch.weights.sum() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn empty_batch_rejected() {
        assert!(matches!(Batch::<f64>::from_examples(&[]), Err(Error::EmptySet)));
    }
}
