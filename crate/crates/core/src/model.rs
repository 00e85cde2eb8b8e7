//! Forward pass, loss and closed-form gradients of the one-block model.
//!
//! A prompt is two unit tokens `[x_1, x_2]`; the last token is the attention
//! query. With merged query-key matrix `Z`, value matrix `V` and feature
//! vectors `w_{k,l}`:
//!
//! ```text
//! alpha = softmax(X^T Z x_2 / sqrt(d))
//! x_a   = X alpha
//! o1    = V x_a
//! f_k   = (lambda / m) sum_l phi(<w_{k,l}, o1>)     phi = id or relu
//! ```
//!
//! The functions here work on one example at a time and follow the
//! closed-form gradient expressions literally. The training loop uses the
//! batched evaluator in [`crate::batch`], which is checked against these.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::embeddings::ModelParams;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Identity,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, h: T) -> T {
        match self {
            Activation::Identity => h,
            Activation::Relu => h.max(T::zero()),
        }
    }

    /// Derivative, with the subgradient at zero taken as 0 for ReLU.
    #[inline]
    pub fn slope<T: Scalar>(self, h: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Relu => {
                if h > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }
}

/// Two-token input `[entity, relation]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt<T> {
    tokens: [Array1<T>; 2],
}

impl<T: Scalar> Prompt<T> {
    pub fn new(first: Array1<T>, last: Array1<T>) -> Result<Self> {
        if first.len() != last.len() || first.is_empty() {
            return Err(Error::Shape(format!(
                "prompt tokens of length {} and {}",
                first.len(),
                last.len()
            )));
        }
        Ok(Self { tokens: [first, last] })
    }

    pub fn from_views(first: ArrayView1<'_, T>, last: ArrayView1<'_, T>) -> Result<Self> {
        Self::new(first.to_owned(), last.to_owned())
    }

    pub fn dim(&self) -> usize {
        self.tokens[0].len()
    }

    pub fn first(&self) -> &Array1<T> {
        &self.tokens[0]
    }

    /// The query token.
    pub fn last(&self) -> &Array1<T> {
        &self.tokens[1]
    }

    pub fn token(&self, j: usize) -> &Array1<T> {
        &self.tokens[j]
    }

    /// `d x 2` matrix with the tokens as columns.
    pub fn matrix(&self) -> Array2<T> {
        let d = self.dim();
        let mut x = Array2::zeros((d, 2));
        x.column_mut(0).assign(&self.tokens[0]);
        x.column_mut(1).assign(&self.tokens[1]);
        x
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample<T> {
    pub prompt: Prompt<T>,
    pub label: usize,
}

impl<T: Scalar> LabeledExample<T> {
    pub fn new(prompt: Prompt<T>, label: usize) -> Self {
        Self { prompt, label }
    }
}

/// Intermediate quantities of one forward evaluation.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    pub alpha: [T; 2],
    pub x_a: Array1<T>,
    pub o1: Array1<T>,
    /// Per-neuron pre-activations `<w_{k,l}, o1>`, shape `(d, m)`.
    pub pre: Array2<T>,
    pub f: Array1<T>,
    pub logit: Array1<T>,
}

/// Parameter groups that gradient descent may update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub struct Groups {
    pub z: bool,
    pub v: bool,
    pub w: bool,
}

impl Groups {
    pub const NONE: Groups = Groups { z: false, v: false, w: false };
    pub const ATTENTION: Groups = Groups { z: true, v: true, w: false };
    pub const FEATURE: Groups = Groups { z: false, v: false, w: true };
    pub const ALL: Groups = Groups { z: true, v: true, w: true };

    pub fn is_empty(&self) -> bool {
        !(self.z || self.v || self.w)
    }

    pub fn label(&self) -> String {
        let mut s = String::new();
        for (on, c) in [(self.z, 'Z'), (self.v, 'V'), (self.w, 'W')] {
            if on {
                s.push(c);
            }
        }
        s
    }
}

/// Gradient blocks; only requested groups are populated.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Gradients<T> {
    pub z: Option<Array2<T>>,
    pub v: Option<Array2<T>>,
    pub w: Option<Array3<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn max_abs(&self) -> T {
        let mut m = T::zero();
        let blocks = self
            .z
            .iter()
            .flat_map(|a| a.iter())
            .chain(self.v.iter().flat_map(|a| a.iter()))
            .chain(self.w.iter().flat_map(|a| a.iter()));
        for &x in blocks {
            m = m.max(x.abs());
        }
        m
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(v: &mut [T]) {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in v.iter_mut() {
        *x /= total;
    }
}

pub(crate) fn log_sum_exp<T: Scalar>(v: ArrayView1<'_, T>) -> T {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let total: T = v.iter().map(|&x| (x - max).exp()).sum();
    max + total.ln()
}

fn check_prompt<T: Scalar>(z: ArrayView2<'_, T>, prompt: &Prompt<T>) -> Result<()> {
    let d = prompt.dim();
    if z.dim() != (d, d) {
        return Err(Error::Shape(format!("Z is {:?} but tokens have length {d}", z.dim())));
    }
    Ok(())
}

/// Softmax of `X^T Z x_last / sqrt(d)` over the two prompt positions.
pub fn attention_weights<T: Scalar>(z: ArrayView2<'_, T>, prompt: &Prompt<T>) -> Result<[T; 2]> {
    check_prompt(z, prompt)?;
    let scale = T::count(prompt.dim()).sqrt();
    let zq = z.dot(prompt.last());
    let mut scores = [prompt.first().dot(&zq) / scale, prompt.last().dot(&zq) / scale];
    softmax_in_place(&mut scores);
    Ok(scores)
}

pub fn forward<T: Scalar>(
    params: &ModelParams<T>,
    prompt: &Prompt<T>,
    activation: Activation,
) -> Result<ForwardTrace<T>> {
    check_prompt(params.z.view(), prompt)?;
    let d = prompt.dim();
    let m = params.width();
    if params.v.dim() != (d, d) || params.w.dim() != (d, m, d) {
        return Err(Error::Shape(format!("V {:?}, W {:?}", params.v.dim(), params.w.dim())));
    }
    let alpha = attention_weights(params.z.view(), prompt)?;
    let x_a = prompt.first() * alpha[0] + prompt.last() * alpha[1];
    let o1 = params.v.dot(&x_a);
    let w_flat = params.w.view().into_shape_with_order((d * m, d)).expect("contiguous W");
    let pre = w_flat.dot(&o1).into_shape_with_order((d, m)).expect("d*m pre-activations");
    let scale = params.lambda / T::count(m);
    let f: Array1<T> = pre
        .axis_iter(Axis(0))
        .map(|row| row.iter().map(|&h| activation.apply(h)).sum::<T>() * scale)
        .collect();
    let mut logit = f.clone();
    softmax_in_place(logit.as_slice_mut().expect("contiguous logits"));
    Ok(ForwardTrace { alpha, x_a, o1, pre, f, logit })
}

/// Per-example cross-entropy, `-log softmax(f)_y`.
pub fn loss<T: Scalar>(
    params: &ModelParams<T>,
    example: &LabeledExample<T>,
    activation: Activation,
) -> Result<T> {
    let trace = forward(params, &example.prompt, activation)?;
    loss_from_logits(trace.f.view(), example.label)
}

pub fn loss_from_logits<T: Scalar>(f: ArrayView1<'_, T>, label: usize) -> Result<T> {
    if label >= f.len() {
        return Err(Error::LabelOutOfRange { label, classes: f.len() });
    }
    Ok(log_sum_exp(f) - f[label])
}

/// Closed-form gradients of the per-example loss.
///
/// With `r = logit - e_y` and the class-averaged map `M` (row `k` equal to
/// `(1/m) sum_l w_{k,l}`), identity mode gives
///
/// * `grad w_{i,j} = (lambda/m) r_i V x_a`
/// * `grad V = lambda M^T r x_a^T`
/// * `grad Z = g x_last^T`, `g^T = (lambda/sqrt d) r^T M V X (diag(alpha) - alpha alpha^T) X^T`
///
/// ReLU mode replaces `lambda M^T r` by the masked sum over active neurons.
pub fn grads<T: Scalar>(
    params: &ModelParams<T>,
    example: &LabeledExample<T>,
    groups: Groups,
    activation: Activation,
) -> Result<Gradients<T>> {
    let d = example.prompt.dim();
    if example.label >= d {
        return Err(Error::LabelOutOfRange { label: example.label, classes: d });
    }
    let trace = forward(params, &example.prompt, activation)?;
    let m = params.width();
    let lambda = params.lambda;
    let per_neuron = lambda / T::count(m);

    let mut residual = trace.logit.clone();
    residual[example.label] -= T::one();

    let mut out = Gradients::default();
    if groups.w {
        let mut gw = Array3::zeros((d, m, d));
        for i in 0..d {
            for j in 0..m {
                let coef = per_neuron * residual[i] * activation.slope(trace.pre[[i, j]]);
                gw.slice_mut(s![i, j, ..]).assign(&(&trace.o1 * coef));
            }
        }
        out.w = Some(gw);
    }
    if !(groups.v || groups.z) {
        return Ok(out);
    }

    // dL/do1
    let upstream: Array1<T> = match activation {
        Activation::Identity => params.feature_map().t().dot(&residual) * lambda,
        Activation::Relu => {
            let mut acc = Array1::zeros(d);
            for k in 0..d {
                for l in 0..m {
                    let coef = per_neuron * residual[k] * activation.slope(trace.pre[[k, l]]);
                    if coef != T::zero() {
                        acc.scaled_add(coef, &params.w.slice(s![k, l, ..]));
                    }
                }
            }
            acc
        }
    };

    if groups.v {
        let col = upstream.view().insert_axis(Axis(1));
        let row = trace.x_a.view().insert_axis(Axis(0));
        out.v = Some(col.dot(&row));
    }
    if groups.z {
        let x = example.prompt.matrix();
        let a = trace.alpha;
        let jac = ndarray::arr2(&[[a[0] - a[0] * a[0], -a[0] * a[1]], [-a[1] * a[0], a[1] - a[1] * a[1]]]);
        let scale = T::count(d).sqrt();
        // row vector: upstream^T V X (diag a - a a^T) X^T / sqrt(d)
        let uvx = upstream.dot(&params.v).dot(&x);
        let g = uvx.dot(&jac).dot(&x.t()) / scale;
        let col = g.view().insert_axis(Axis(1));
        let row = example.prompt.last().view().insert_axis(Axis(0));
        out.z = Some(col.dot(&row));
    }
    Ok(out)
}

/// `f_y - max_{k != y} f_k`.
pub fn margin<T: Scalar>(f: ArrayView1<'_, T>, label: usize) -> T {
    let rival = f
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != label)
        .map(|(_, &x)| x)
        .fold(T::neg_infinity(), T::max);
    f[label] - rival
}

/// Lowest index attaining the maximum logit.
pub fn argmax<T: Scalar>(f: ArrayView1<'_, T>) -> usize {
    let mut best = 0;
    for (k, &x) in f.iter().enumerate() {
        if x > f[best] {
            best = k;
        }
    }
    best
}

/// Predicted class, lowest index on ties.
pub fn predict<T: Scalar>(params: &ModelParams<T>, prompt: &Prompt<T>, activation: Activation) -> Result<usize> {
    let trace = forward(params, prompt, activation)?;
    Ok(argmax(trace.f.view()))
}

/// Correct only when the labelled logit strictly beats every rival; ties fail.
pub fn is_correct<T: Scalar>(f: ArrayView1<'_, T>, label: usize) -> bool {
    margin(f, label) > T::zero()
}
