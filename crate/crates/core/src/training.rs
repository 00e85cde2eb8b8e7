//! Full-batch gradient descent schedules over a corpus.

use log::{debug, warn};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::batch::{apply_update, attend, evaluate, gradients, Attended, Batch};
use crate::datasets::{assemble_train, Corpus, Recipe, Task, TrainMultiset};
use crate::embeddings::ModelParams;
use crate::error::{Error, Result};
use crate::metrics::{margins, pair_similarities, error_from_margins, MeanStd, MetricSnapshot, SpanProjector};
use crate::model::{Activation, Groups};
use crate::scalar::Scalar;

/// One block of iterations updating a fixed set of parameter groups.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub groups: Groups,
    pub iterations: usize,
    pub step_size: f64,
}

impl Stage {
    pub fn new(groups: Groups, iterations: usize, step_size: f64) -> Self {
        Self { groups, iterations, step_size }
    }
}

/// Stages run in order on the multiset assembled from one recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub recipe: Recipe,
    pub kappa: usize,
    pub stages: Vec<Stage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub phases: Vec<Phase>,
}

/// Curriculum order for the analogical task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Order {
    SThenA,
    AThenS,
}

/// Iteration counts and step sizes shared by the layer-wise schedules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub t1: usize,
    pub t2: usize,
    pub t3: usize,
    /// Step size while training `{Z, V}`.
    pub eta_attention: f64,
    /// Step size while training `{W}`.
    pub eta_feature: f64,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.phases.is_empty() {
            return Err(Error::Parameter { name: "schedule", reason: "no phases".into() });
        }
        for phase in &self.phases {
            if phase.kappa == 0 {
                return Err(Error::Parameter { name: "kappa", reason: "must be at least 1".into() });
            }
            for stage in &phase.stages {
                if stage.groups.is_empty() {
                    return Err(Error::Parameter { name: "groups", reason: "stage updates nothing".into() });
                }
                if !(stage.step_size > 0.0 && stage.step_size.is_finite()) {
                    return Err(Error::Parameter {
                        name: "step_size",
                        reason: format!("{} is not positive", stage.step_size),
                    });
                }
            }
        }
        Ok(())
    }

    /// Attention stage then feature stage on one multiset.
    pub fn layerwise(recipe: Recipe, kappa: usize, timing: &Timing) -> Self {
        Self {
            phases: vec![Phase {
                recipe,
                kappa,
                stages: vec![
                    Stage::new(Groups::ATTENTION, timing.t1, timing.eta_attention),
                    Stage::new(Groups::FEATURE, timing.t2, timing.eta_feature),
                ],
            }],
        }
    }

    /// Layer-wise phase 1 followed by a feature-only phase 2.
    pub fn sequential(order: Order, timing: &Timing) -> Self {
        let (first, second) = match order {
            Order::SThenA => (Recipe::Phase1S1S2, Recipe::Phase2S3),
            Order::AThenS => (Recipe::Phase1S1S3, Recipe::Phase2S2),
        };
        let mut schedule = Self::layerwise(first, 1, timing);
        schedule.phases.push(Phase {
            recipe: second,
            kappa: 1,
            stages: vec![Stage::new(Groups::FEATURE, timing.t3, timing.eta_feature)],
        });
        schedule
    }

    /// All groups trained together in a single stage.
    pub fn end_to_end(recipe: Recipe, kappa: usize, iterations: usize, eta: f64) -> Self {
        Self { phases: vec![Phase { recipe, kappa, stages: vec![Stage::new(Groups::ALL, iterations, eta)] }] }
    }

    pub fn total_iterations(&self) -> usize {
        self.phases.iter().flat_map(|p| &p.stages).map(|s| s.iterations).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub activation: Activation,
    /// Training loss is recorded every `log_every` iterations.
    pub log_every: usize,
    /// Abort once any logit exceeds this in magnitude.
    pub divergence_limit: f64,
    /// Record span residuals while `W` is frozen.
    pub track_span: bool,
    /// Also take metric snapshots at every logging point, not only at stage
    /// boundaries.
    pub snapshot_at_logs: bool,
    /// Per-step slack for the feature-stage monotonicity check.
    pub monotone_slack: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            activation: Activation::Identity,
            log_every: 10,
            divergence_limit: 1e6,
            track_span: false,
            snapshot_at_logs: false,
            monotone_slack: 1e-9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    /// Global iteration index (counted across phases and stages).
    pub iteration: usize,
    pub phase: usize,
    pub stage: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct RunResult<T> {
    pub final_params: ModelParams<T>,
    pub loss_trace: Vec<LossPoint>,
    pub snapshots: Vec<MetricSnapshot>,
    pub test_error: f64,
    /// `f_y - max_{k != y} f_k` on the test set, in test-set order.
    pub margins: Vec<T>,
    /// Loss of the final parameters on the last phase's multiset.
    pub final_train_loss: f64,
    /// Lowest loss seen during the last phase.
    pub best_loss: Option<LossPoint>,
    /// Final per-pair feature similarities.
    pub similarities: Vec<f64>,
    pub diagnostics: Vec<String>,
}

impl<T> RunResult<T> {
    pub fn success_rate(&self) -> f64 {
        1.0 - self.test_error
    }

    pub fn feature_sim(&self) -> MeanStd {
        MeanStd::of(&self.similarities)
    }
}

fn check_logits<T: Scalar>(max_abs: T, iteration: usize, limit: f64) -> Result<()> {
    let v = max_abs.as_f64();
    if !v.is_finite() {
        return Err(Error::Divergence { iteration, reason: "non-finite logit".into() });
    }
    if v > limit {
        return Err(Error::Divergence { iteration, reason: format!("|f| = {v:e} exceeds {limit:e}") });
    }
    Ok(())
}

/// One full-batch gradient step on the multiset-average loss, touching only
/// `groups`.
pub fn gd_step<T: Scalar>(
    params: &mut ModelParams<T>,
    multiset: &TrainMultiset<T>,
    groups: Groups,
    eta: T,
    activation: Activation,
) -> Result<()> {
    let batch = Batch::from_multiset(multiset)?;
    step_on_batch(params, &batch, groups, eta, activation, 0)
}

fn step_on_batch<T: Scalar>(
    params: &mut ModelParams<T>,
    batch: &Batch<T>,
    groups: Groups,
    eta: T,
    activation: Activation,
    iteration: usize,
) -> Result<()> {
    let fmap = params.feature_map();
    let att = attend(params, batch);
    let ev = evaluate(params, &fmap, &att, batch, activation);
    check_logits(ev.max_abs_logit(), iteration, f64::INFINITY)?;
    let g = gradients(params, &fmap, &att, &ev, batch, groups, activation);
    if !g.all_finite() {
        return Err(Error::Divergence { iteration, reason: "non-finite gradient".into() });
    }
    apply_update(params, &g, eta);
    Ok(())
}

struct Tracker<'c, T> {
    corpus: &'c Corpus<T>,
    pairs: Vec<(usize, usize)>,
    tracked_tokens: Vec<usize>,
    test: Vec<crate::model::LabeledExample<T>>,
    options: TrainOptions,
}

impl<T: Scalar> Tracker<'_, T> {
    fn snapshot(
        &self,
        params: &ModelParams<T>,
        att: &Attended<T>,
        span: Option<(&SpanProjector<T>, &Array2<T>)>,
        when: (usize, usize, usize),
    ) -> Result<MetricSnapshot> {
        let sims = pair_similarities(params.v.view(), self.corpus.embeddings.vectors(), &self.pairs)?;
        let ratios = att.alpha_first.iter().zip(&att.alpha_last).map(|(&a, &b)| (a / b).as_f64());
        let (lo, hi) = ratios.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r), hi.max(r)));
        let span_residual = span.map(|(proj, v0)| {
            let delta = &params.v - v0;
            self.tracked_tokens
                .iter()
                .map(|&t| {
                    let r = delta.dot(&self.corpus.embeddings.vector(t));
                    proj.relative_residual(r.view()).as_f64()
                })
                .fold(0.0, f64::max)
        });
        let m = margins(params, &self.test, self.options.activation)?;
        Ok(MetricSnapshot {
            when: when.0,
            phase: when.1,
            stage: when.2,
            feature_sim: MeanStd::of(&sims),
            attention_ratio_min: lo,
            attention_ratio_max: hi,
            span_residual,
            test_error: Some(error_from_margins(&m)),
        })
    }
}

/// Runs every phase and stage of `schedule`, starting from `params`.
pub fn run_schedule<T: Scalar>(
    corpus: &Corpus<T>,
    mut params: ModelParams<T>,
    schedule: &Schedule,
    options: &TrainOptions,
) -> Result<RunResult<T>> {
    schedule.validate()?;
    params.validate()?;
    let activation = options.activation;
    let log_every = options.log_every.max(1);
    let tracker = Tracker {
        corpus,
        pairs: corpus.similarity_pairs(),
        tracked_tokens: corpus.entity_tokens(),
        test: corpus.test_examples(),
        options: *options,
    };
    let mut loss_trace = Vec::new();
    let mut snapshots = Vec::new();
    let mut diagnostics = Vec::new();
    let mut best_loss: Option<LossPoint> = None;
    let mut global = 0usize;
    let mut last_batch = None;

    for (pi, phase) in schedule.phases.iter().enumerate() {
        let multiset = assemble_train(corpus, phase.recipe, phase.kappa)?;
        let batch = Batch::from_multiset(&multiset)?;
        best_loss = None;
        if pi == 0 {
            let att = attend(&params, &batch);
            snapshots.push(tracker.snapshot(&params, &att, None, (0, 0, 0))?);
        }
        for (si, stage) in phase.stages.iter().enumerate() {
            let groups = stage.groups;
            let eta = T::lit(stage.step_size);
            let attention_frozen = !groups.z && !groups.v;
            let span = (options.track_span && !groups.w)
                .then(|| (SpanProjector::from_feature_layer(&params.w), params.v.clone()));
            let span_ref = span.as_ref().map(|(p, v)| (p, v));
            let cached_att = attention_frozen.then(|| attend(&params, &batch));
            let cached_fmap = (!groups.w).then(|| params.feature_map());
            let mut prev_loss: Option<T> = None;
            let mut violations = 0usize;
            let mut worst_rise = 0.0f64;
            let mut first_violation = None;
            debug!(
                "phase {pi} ({}) stage {si}: groups {} for {} iterations, eta {}",
                phase.recipe,
                groups.label(),
                stage.iterations,
                stage.step_size
            );
            for t in 0..stage.iterations {
                let fmap_owned;
                let fmap = match &cached_fmap {
                    Some(f) => f,
                    None => {
                        fmap_owned = params.feature_map();
                        &fmap_owned
                    }
                };
                let att_owned;
                let att = match &cached_att {
                    Some(a) => a,
                    None => {
                        att_owned = attend(&params, &batch);
                        &att_owned
                    }
                };
                let ev = evaluate(&params, fmap, att, &batch, activation);
                check_logits(ev.max_abs_logit(), global, options.divergence_limit)?;
                let loss = ev.weighted_loss(&batch);
                let point = LossPoint { iteration: global, phase: pi, stage: si, loss: loss.as_f64() };
                if best_loss.is_none_or(|b| point.loss < b.loss) {
                    best_loss = Some(point);
                }
                if groups == Groups::FEATURE && activation == Activation::Identity {
                    if let Some(prev) = prev_loss {
                        if loss > prev + T::lit(options.monotone_slack) {
                            violations += 1;
                            worst_rise = worst_rise.max((loss - prev).as_f64());
                            first_violation.get_or_insert(global);
                        }
                    }
                    prev_loss = Some(loss);
                }
                if t % log_every == 0 {
                    debug!("iter {global}: loss {:.6e}", point.loss);
                    loss_trace.push(point);
                    if options.snapshot_at_logs && t > 0 {
                        snapshots.push(tracker.snapshot(&params, att, span_ref, (global, pi, si))?);
                    }
                }
                let g = gradients(&params, fmap, att, &ev, &batch, groups, activation);
                if !g.all_finite() {
                    return Err(Error::Divergence { iteration: global, reason: "non-finite gradient".into() });
                }
                apply_update(&mut params, &g, eta);
                global += 1;
            }
            if violations > 0 {
                let msg = format!(
                    "phase {pi} stage {si}: training loss rose on {violations} feature-stage steps \
                     (first at iteration {}, largest rise {worst_rise:.3e}); step size may be too large",
                    first_violation.unwrap_or(global)
                );
                warn!("{msg}");
                diagnostics.push(msg);
            }
            // a cached attention pass is still exact: Z and V were frozen
            let att = cached_att.unwrap_or_else(|| attend(&params, &batch));
            snapshots.push(tracker.snapshot(&params, &att, span_ref, (global, pi, si))?);
        }
        last_batch = Some(batch);
    }

    let batch = last_batch.expect("schedule has a phase");
    let fmap = params.feature_map();
    let att = attend(&params, &batch);
    let ev = evaluate(&params, &fmap, &att, &batch, activation);
    check_logits(ev.max_abs_logit(), global, options.divergence_limit)?;
    let final_train_loss = ev.weighted_loss(&batch).as_f64();
    let last_phase = schedule.phases.len() - 1;
    let last_stage = schedule.phases[last_phase].stages.len().saturating_sub(1);
    let final_point = LossPoint { iteration: global, phase: last_phase, stage: last_stage, loss: final_train_loss };
    if best_loss.is_none_or(|b| final_point.loss < b.loss) {
        best_loss = Some(final_point);
    }
    loss_trace.push(final_point);

    let test_margins = margins(&params, &tracker.test, activation)?;
    let test_error = error_from_margins(&test_margins);
    let similarities = pair_similarities(params.v.view(), corpus.embeddings.vectors(), &tracker.pairs)?;
    Ok(RunResult {
        final_params: params,
        loss_trace,
        snapshots,
        test_error,
        margins: test_margins,
        final_train_loss,
        best_loss,
        similarities,
        diagnostics,
    })
}

/// The joint recipe matching the corpus task.
pub fn joint_recipe(task: Task) -> Recipe {
    match task {
        Task::Analogical => Recipe::JointAnalogical,
        Task::TwoHop { bridge: true } => Recipe::JointTwohopBridge,
        Task::TwoHop { bridge: false } => Recipe::JointTwohopNobridge,
    }
}

/// Attention stage then feature stage on the joint multiset.
pub fn run_joint<T: Scalar>(
    corpus: &Corpus<T>,
    params: ModelParams<T>,
    kappa: usize,
    timing: &Timing,
    options: &TrainOptions,
) -> Result<RunResult<T>> {
    let schedule = Schedule::layerwise(joint_recipe(corpus.task), kappa, timing);
    run_schedule(corpus, params, &schedule, options)
}

pub fn run_sequential<T: Scalar>(
    corpus: &Corpus<T>,
    params: ModelParams<T>,
    order: Order,
    timing: &Timing,
    options: &TrainOptions,
) -> Result<RunResult<T>> {
    if corpus.task != Task::Analogical {
        return Err(Error::Recipe {
            recipe: format!("{order:?}"),
            reason: "sequential schedules need an analogical corpus".into(),
        });
    }
    run_schedule(corpus, params, &Schedule::sequential(order, timing), options)
}

pub fn run_end_to_end<T: Scalar>(
    corpus: &Corpus<T>,
    params: ModelParams<T>,
    recipe: Recipe,
    kappa: usize,
    iterations: usize,
    eta: f64,
    options: &TrainOptions,
) -> Result<RunResult<T>> {
    run_schedule(corpus, params, &Schedule::end_to_end(recipe, kappa, iterations, eta), options)
}

/// One of the three regularity conditions, evaluated with `C = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Advisory {
    pub name: &'static str,
    pub lhs: f64,
    pub rhs: f64,
    pub satisfied: bool,
}

/// Dimension, initialization-scale and step-size conditions with the
/// universal constant set to one. `n` is the effective training-set size.
pub fn condition_advisories(
    d: usize,
    m: usize,
    n: usize,
    n_entities: usize,
    lambda: f64,
    sigma0: f64,
    eta: f64,
    delta: f64,
) -> Vec<Advisory> {
    let (df, mf, nf, big_n) = (d as f64, m as f64, n as f64, n_entities as f64);
    let dim_rhs = (4.0 * mf * df / delta).ln().max(mf.powi(3) * nf * big_n * big_n / lambda.powi(6));
    let sigma_rhs = (nf * mf).sqrt() * df.ln() / (df * lambda);
    let eta_rhs = lambda * lambda / (big_n * mf * df * sigma0 * sigma0 * df.ln().powi(2));
    vec![
        Advisory { name: "large embedding dimension", lhs: df, rhs: dim_rhs, satisfied: df >= dim_rhs },
        Advisory { name: "small initialization", lhs: sigma0, rhs: sigma_rhs, satisfied: sigma0 <= sigma_rhs },
        Advisory { name: "small learning rate", lhs: eta, rhs: eta_rhs, satisfied: eta <= eta_rhs },
    ]
}

/// Logs each advisory as info or warning and returns the violated ones.
pub fn log_advisories(advisories: &[Advisory]) -> Vec<&Advisory> {
    let mut violated = Vec::new();
    for a in advisories {
        if a.satisfied {
            debug!("condition `{}` holds: {:.4e} vs {:.4e}", a.name, a.lhs, a.rhs);
        } else {
            warn!("condition `{}` violated with C = 1: {:.4e} vs {:.4e}", a.name, a.lhs, a.rhs);
            violated.push(a);
        }
    }
    violated
}
