//! Central finite-difference oracle for the closed-form gradients.
//!
//! The numeric side evaluates the loss with plain index loops over slices,
//! sharing no code with [`crate::model`] beyond the parameter container.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use twofloat::TwoFloat;

use crate::embeddings::{gaussian, sample_orthonormal_system, seeded_rng, ModelParams};
use crate::error::{Error, Result};
use crate::model::{self, Activation, Gradients, Groups, LabeledExample, Prompt};

/// Magnitude below which both gradients count as vanishing.
pub const SMALL_GRADIENT: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CheckConfig {
    pub d: usize,
    pub m: usize,
    pub seed: Option<u64>,
    pub h: f64,
    pub precision: Precision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    /// `"Z"`, `"V"` or `"W"`.
    pub group: String,
    pub max_rel_error: f64,
    /// Index of the worst coordinate within its group.
    pub worst_coordinate: Vec<usize>,
    pub max_abs_closed: f64,
    pub max_abs_numeric: f64,
    /// Both gradients are below [`SMALL_GRADIENT`]; relative errors are then
    /// dominated by the denominator floor.
    pub small_regime: bool,
    pub config: CheckConfig,
}

/// Arithmetic the numeric oracle can run in.
pub trait OracleReal:
    Copy
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn max(self, other: Self) -> Self;
}

impl OracleReal for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn max(self, other: Self) -> Self {
        f64::max(self, other)
    }
}

/// Double-double number. `twofloat` supplies exact `+ - *`; its quotient and
/// its `exp`/`ln` are only good to about 1e-16, so those are refined here.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct DoubleDouble(TwoFloat);

impl std::ops::Add for DoubleDouble {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Self(self.0 + rhs.0)
    }
}

impl std::ops::Sub for DoubleDouble {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        Self(self.0 - rhs.0)
    }
}

impl std::ops::Mul for DoubleDouble {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        Self(self.0 * rhs.0)
    }
}

impl std::ops::Div for DoubleDouble {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        // one Newton correction on the quotient using the exact residual
        let q = self.0 / rhs.0;
        let resid = self.0 - q * rhs.0;
        Self(q + resid / rhs.0)
    }
}

impl std::ops::Neg for DoubleDouble {
    type Output = Self;
    fn neg(self) -> Self {
        Self(-self.0)
    }
}

impl OracleReal for DoubleDouble {
    fn from_f64(x: f64) -> Self {
        Self(TwoFloat::from(x))
    }
    fn to_f64(self) -> f64 {
        self.0.hi() + self.0.lo()
    }
    fn exp(self) -> Self {
        // exp(x) = exp(x / 2^k)^(2^k) with |x / 2^k| <= 1/16; few squarings
        // keep the relative error near 1e-31
        let k = self.0.hi().abs().max(1.0).log2().ceil() as i32 + 4;
        let r = Self(self.0 * TwoFloat::from(2f64.powi(-k)));
        let one = Self::from_f64(1.0);
        let mut term = one;
        let mut sum = one;
        for n in 1..=24 {
            term = term * r / Self::from_f64(n as f64);
            sum = sum + term;
        }
        for _ in 0..k {
            sum = sum * sum;
        }
        sum
    }
    fn ln(self) -> Self {
        // Newton on exp(y) = x from the f64 estimate; each step doubles the
        // number of correct digits.
        let mut y = Self::from_f64(self.0.hi().ln());
        for _ in 0..2 {
            y = y + self * OracleReal::exp(-y) - Self::from_f64(1.0);
        }
        y
    }
    fn sqrt(self) -> Self {
        // Newton step on the f64 root: s + (x - s^2) / (2 s)
        let s = Self::from_f64(self.0.hi().sqrt());
        s + (self - s * s) / (s + s)
    }
    fn max(self, other: Self) -> Self {
        if other > self { other } else { self }
    }
}

/// Numeric precision of the finite-difference oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    /// Plain `f64`. The difference quotient then carries a rounding floor
    /// of roughly `1e-16 / h`, which swamps small coordinates.
    Double,
    /// Double-double, about 32 significant digits.
    #[default]
    DoubleDouble,
}

/// Parameters copied into the oracle's number type.
struct OracleParams<F> {
    d: usize,
    m: usize,
    z: Vec<F>,
    v: Vec<F>,
    w: Vec<F>,
    lambda: F,
    x1: Vec<F>,
    x2: Vec<F>,
    label: usize,
}

impl<F: OracleReal> OracleParams<F> {
    fn new(params: &ModelParams<f64>, example: &LabeledExample<f64>) -> Self {
        let conv = |it: &mut dyn Iterator<Item = &f64>| it.map(|&x| F::from_f64(x)).collect::<Vec<F>>();
        Self {
            d: params.dim(),
            m: params.width(),
            z: conv(&mut params.z.iter()),
            v: conv(&mut params.v.iter()),
            w: conv(&mut params.w.iter()),
            lambda: F::from_f64(params.lambda),
            x1: conv(&mut example.prompt.first().iter()),
            x2: conv(&mut example.prompt.last().iter()),
            label: example.label,
        }
    }

    fn slot(&mut self, idx: usize) -> &mut F {
        let (nz, nv) = (self.z.len(), self.v.len());
        if idx < nz {
            &mut self.z[idx]
        } else if idx < nz + nv {
            &mut self.v[idx - nz]
        } else {
            &mut self.w[idx - nz - nv]
        }
    }

    /// Per-example cross-entropy with explicit loops, row-major indexing.
    fn loss(&self) -> F {
        let (d, m) = (self.d, self.m);
        let zero = F::from_f64(0.0);
        let dot = |a: &[F], b: &[F]| a.iter().zip(b).fold(zero, |acc, (&p, &q)| acc + p * q);
        let mut zq = vec![zero; d];
        for (i, out) in zq.iter_mut().enumerate() {
            *out = dot(&self.z[i * d..(i + 1) * d], &self.x2);
        }
        let root = F::from_f64(d as f64).sqrt();
        let s1 = dot(&self.x1, &zq) / root;
        let s2 = dot(&self.x2, &zq) / root;
        let one = F::from_f64(1.0);
        let a1 = one / (one + (s2 - s1).exp());
        let a2 = one - a1;
        let xa: Vec<F> = self.x1.iter().zip(&self.x2).map(|(&p, &q)| a1 * p + a2 * q).collect();
        let mut o1 = vec![zero; d];
        for (i, out) in o1.iter_mut().enumerate() {
            *out = dot(&self.v[i * d..(i + 1) * d], &xa);
        }
        let scale = self.lambda / F::from_f64(m as f64);
        let f: Vec<F> = (0..d)
            .map(|k| {
                let acc = (0..m).fold(zero, |acc, l| {
                    let start = (k * m + l) * d;
                    acc + dot(&self.w[start..start + d], &o1)
                });
                scale * acc
            })
            .collect();
        let mx = f.iter().copied().fold(f[0], F::max);
        let total = f.iter().fold(zero, |acc, &x| acc + (x - mx).exp());
        mx + total.ln() - f[self.label]
    }

    /// Central difference quotient along flat coordinate `idx` (Z, then V,
    /// then W, each row-major).
    fn central(&mut self, idx: usize, h: f64) -> f64 {
        let orig = *self.slot(idx);
        let hh = F::from_f64(h);
        *self.slot(idx) = orig + hh;
        let up = self.loss();
        *self.slot(idx) = orig - hh;
        let down = self.loss();
        *self.slot(idx) = orig;
        ((up - down) / (hh + hh)).to_f64()
    }
}

/// Loss of one example, computed with explicit loops in `f64`.
pub fn naive_loss(params: &ModelParams<f64>, example: &LabeledExample<f64>) -> f64 {
    OracleParams::<f64>::new(params, example).loss()
}

/// Central difference quotients for every flat coordinate in `coords`.
fn numeric_gradient(
    params: &ModelParams<f64>,
    example: &LabeledExample<f64>,
    h: f64,
    precision: Precision,
    coords: std::ops::Range<usize>,
) -> Vec<f64> {
    match precision {
        Precision::Double => {
            let mut p = OracleParams::<f64>::new(params, example);
            coords.map(|i| p.central(i, h)).collect()
        }
        Precision::DoubleDouble => {
            let mut p = OracleParams::<DoubleDouble>::new(params, example);
            coords.map(|i| p.central(i, h)).collect()
        }
    }
}

fn rel_error(closed: f64, numeric: f64) -> f64 {
    (closed - numeric).abs() / closed.abs().max(numeric.abs()).max(1e-10)
}

fn report(group: &str, shape: &[usize], closed: &[f64], numeric: &[f64], config: CheckConfig) -> GradReport {
    let mut worst = (0.0f64, 0usize);
    for (i, (&c, &n)) in closed.iter().zip(numeric).enumerate() {
        let e = rel_error(c, n);
        if e > worst.0 {
            worst = (e, i);
        }
    }
    let max_abs = |v: &[f64]| v.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    let (max_abs_closed, max_abs_numeric) = (max_abs(closed), max_abs(numeric));
    // unravel the flat row-major index
    let mut rest = worst.1;
    let mut coord = vec![0; shape.len()];
    for (slot, &extent) in coord.iter_mut().zip(shape).rev() {
        *slot = rest % extent;
        rest /= extent;
    }
    GradReport {
        group: group.to_owned(),
        max_rel_error: worst.0,
        worst_coordinate: coord,
        max_abs_closed,
        max_abs_numeric,
        small_regime: max_abs_closed < SMALL_GRADIENT && max_abs_numeric < SMALL_GRADIENT,
        config,
    }
}

/// Compares `closed` against central differences of the explicit-loop loss
/// for every coordinate of the requested groups.
pub fn compare_with(
    params: &ModelParams<f64>,
    example: &LabeledExample<f64>,
    closed: &Gradients<f64>,
    config: CheckConfig,
    groups: Groups,
) -> Vec<GradReport> {
    let (d, m) = (params.dim(), params.width());
    let (nz, nv, nw) = (d * d, d * d, d * m * d);
    let mut out = Vec::new();
    let blocks: [(&str, bool, Option<Vec<f64>>, std::ops::Range<usize>, Vec<usize>); 3] = [
        ("Z", groups.z, closed.z.as_ref().map(|g| g.iter().copied().collect()), 0..nz, vec![d, d]),
        ("V", groups.v, closed.v.as_ref().map(|g| g.iter().copied().collect()), nz..nz + nv, vec![d, d]),
        ("W", groups.w, closed.w.as_ref().map(|g| g.iter().copied().collect()), nz + nv..nz + nv + nw, vec![d, m, d]),
    ];
    for (name, on, flat, range, shape) in blocks {
        if !on {
            continue;
        }
        let flat = flat.expect("requested group present");
        let numeric = numeric_gradient(params, example, config.h, config.precision, range);
        out.push(report(name, &shape, &flat, &numeric, config));
    }
    out
}

/// Closed-form gradients against central differences with step `h`, using
/// the default oracle precision.
pub fn finite_diff_check(
    params: &ModelParams<f64>,
    example: &LabeledExample<f64>,
    h: f64,
    groups: Groups,
) -> Result<Vec<GradReport>> {
    finite_diff_check_with(params, example, h, groups, Precision::default())
}

pub fn finite_diff_check_with(
    params: &ModelParams<f64>,
    example: &LabeledExample<f64>,
    h: f64,
    groups: Groups,
    precision: Precision,
) -> Result<Vec<GradReport>> {
    check_step(h)?;
    let closed = model::grads(params, example, groups, Activation::Identity)?;
    let config = CheckConfig { d: params.dim(), m: params.width(), seed: None, h, precision };
    Ok(compare_with(params, example, &closed, config, groups))
}

fn check_step(h: f64) -> Result<()> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::Parameter { name: "h", reason: format!("{h} outside [1e-7, 1e-3]") });
    }
    Ok(())
}

/// A seeded instance with parameters scaled so logits and attention scores
/// are of order one.
pub fn random_case(d: usize, m: usize, seed: u64) -> Result<(ModelParams<f64>, LabeledExample<f64>)> {
    let mut rng = seeded_rng(seed);
    let tokens = sample_orthonormal_system::<f64>(2, d, &mut rng)?;
    let root = (d as f64).sqrt();
    let z = Array2::from_shape_simple_fn((d, d), || gaussian::<f64>(&mut rng, root));
    let v = Array2::from_shape_simple_fn((d, d), || gaussian::<f64>(&mut rng, 1.0 / root));
    let w = ndarray::Array3::from_shape_simple_fn((d, m, d), || gaussian::<f64>(&mut rng, 1.0));
    let label = (seed as usize) % d;
    let params = ModelParams { z, v, w, lambda: 2.0 };
    let prompt = Prompt::from_views(tokens.vector(0), tokens.vector(1))?;
    Ok((params, LabeledExample::new(prompt, label)))
}

/// Runs the check on [`random_case`] for all three groups.
pub fn check_random(d: usize, m: usize, seed: u64, h: f64, precision: Precision) -> Result<Vec<GradReport>> {
    check_step(h)?;
    let (params, example) = random_case(d, m, seed)?;
    let closed = model::grads(&params, &example, Groups::ALL, Activation::Identity)?;
    let config = CheckConfig { d, m, seed: Some(seed), h, precision };
    Ok(compare_with(&params, &example, &closed, config, Groups::ALL))
}

/// Largest absolute gap between closed-form and numeric gradients over all
/// coordinates.
pub fn max_abs_gap(
    params: &ModelParams<f64>,
    example: &LabeledExample<f64>,
    h: f64,
    precision: Precision,
) -> Result<f64> {
    let closed = model::grads(params, example, Groups::ALL, Activation::Identity)?;
    let flat: Vec<f64> =
        closed.z.iter().flatten().chain(closed.v.iter().flatten()).chain(closed.w.iter().flatten()).copied().collect();
    let numeric = numeric_gradient(params, example, h, precision, 0..flat.len());
    Ok(flat.iter().zip(&numeric).fold(0.0, |a, (c, n)| a.max((c - n).abs())))
}

/// A case whose labelled logit overwhelms the others, so every gradient
/// nearly vanishes.
pub fn saturated_case(d: usize, seed: u64) -> Result<(ModelParams<f64>, LabeledExample<f64>)> {
    let (mut params, example) = random_case(d, 1, seed)?;
    // Make W's label row a large multiple of the current value output, so the
    // labelled logit dominates every other one.
    let trace = model::forward(&params, &example.prompt, Activation::Identity)?;
    let o1: Array1<f64> = trace.o1;
    params.w.fill(0.0);
    let scale = 200.0 / o1.dot(&o1);
    params.w.slice_mut(ndarray::s![example.label, 0, ..]).assign(&(&o1 * scale));
    params.lambda = 1.0;
    Ok((params, example))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn double_double_arithmetic_is_tight() {
        let a = DoubleDouble::from_f64(0.1);
        let b = DoubleDouble::from_f64(3.0);
        let q = a / b;
        assert!((q * b - a).to_f64().abs() < 1e-31);
        let x = DoubleDouble::from_f64(0.37);
        assert!((x.exp().ln() - x).to_f64().abs() < 1e-30);
        let two = DoubleDouble::from_f64(2.0);
        let r = two.sqrt();
        assert!((r * r - two).to_f64().abs() < 1e-30);
        // e minus its nearest f64, from a 50-digit reference
        let e = DoubleDouble::from_f64(1.0).exp();
        let tail = (e - DoubleDouble::from_f64(std::f64::consts::E)).to_f64();
        assert!((tail - 1.4456468917292502e-16).abs() < 1e-30, "{tail:e}");
    }

    #[test]
    fn oracle_precisions_agree_on_the_loss() {
        let (params, ex) = random_case(8, 3, 4).unwrap();
        let plain = OracleParams::<f64>::new(&params, &ex).loss();
        let wide = OracleParams::<DoubleDouble>::new(&params, &ex).loss().to_f64();
        assert!((plain - wide).abs() < 1e-14);
        let direct = model::loss(&params, &ex, Activation::Identity).unwrap();
        assert!((plain - direct).abs() < 1e-13);
    }

    #[test]
    fn small_instances_pass() {
        for seed in 0..3 {
            for r in check_random(4, 2, seed, 1e-5, Precision::DoubleDouble).unwrap() {
                assert!(r.max_rel_error < 1e-6, "{r:?}");
                assert!(!r.small_regime);
            }
        }
    }

    #[test]
    fn sign_flip_is_detected() {
        let (params, ex) = random_case(4, 2, 9).unwrap();
        let mut closed = model::grads(&params, &ex, Groups::ALL, Activation::Identity).unwrap();
        closed.z = closed.z.map(|g| -g);
        let config = CheckConfig { d: 4, m: 2, seed: Some(9), h: 1e-5, precision: Precision::DoubleDouble };
        let reports = compare_with(&params, &ex, &closed, config, Groups::ALL);
        let z = reports.iter().find(|r| r.group == "Z").unwrap();
        assert!((z.max_rel_error - 2.0).abs() < 1e-6, "{}", z.max_rel_error);
        for r in reports.iter().filter(|r| r.group != "Z") {
            assert!(r.max_rel_error < 1e-6);
        }
    }

    #[test]
    fn saturated_logit_flags_small_regime() {
        let (params, ex) = saturated_case(4, 3).unwrap();
        let reports = finite_diff_check(&params, &ex, 1e-5, Groups::ALL).unwrap();
        for r in &reports {
            assert!(r.max_abs_closed < 1e-8 && r.max_abs_numeric < 1e-8, "{r:?}");
            assert!(r.small_regime);
        }
    }

    #[test]
    fn central_differences_converge_quadratically() {
        for seed in [1, 2, 3] {
            let (params, ex) = random_case(4, 2, seed).unwrap();
            let coarse = max_abs_gap(&params, &ex, 1e-3, Precision::DoubleDouble).unwrap();
            let fine = max_abs_gap(&params, &ex, 5e-4, Precision::DoubleDouble).unwrap();
            let ratio = coarse / fine;
            assert!((3.5..4.5).contains(&ratio), "seed {seed}: ratio {ratio}");
        }
    }

    #[test]
    fn step_outside_range_rejected() {
        let (params, ex) = random_case(4, 1, 0).unwrap();
        assert!(finite_diff_check(&params, &ex, 1e-2, Groups::ALL).is_err());
        assert!(finite_diff_check(&params, &ex, 1e-8, Groups::ALL).is_err());
    }
}
