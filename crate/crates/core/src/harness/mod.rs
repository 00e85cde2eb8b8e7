//! Experiment orchestration: config → corpus and parameters per seed →
//! schedule → one report row per seed plus an aggregate row.

pub mod config;
pub mod report;

use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;

use crate::datasets::{assemble_train, build_analogical, build_two_hop, Corpus, Recipe};
use crate::deep_linear::{train_layerwise_linear, DeepLinearConfig};
use crate::embeddings::{init_params, seeded_rng, ModelParams};
use crate::error::{Error, Result};
use crate::gradcheck::{check_random, GradReport};
use crate::metrics::{MeanStd, MetricSnapshot};
use crate::model::Groups;
use crate::training::{
    condition_advisories, joint_recipe, log_advisories, run_schedule, Advisory, Order, Phase, Schedule, Stage, Timing,
    TrainOptions,
};

pub use config::{EndToEndRegime, ExperimentConfig, Format, Scenario, SweepMode};
pub use report::{emit_report, CurveRow, ReportRow};

/// Everything measured for one seed, beyond its report row.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub seed: u64,
    pub kappa: Option<usize>,
    pub snapshots: Vec<MetricSnapshot>,
    pub similarities: Vec<f64>,
    pub test_error: Option<f64>,
    pub final_train_loss: Option<f64>,
    pub diagnostics: Vec<String>,
    /// Same-label similarity by depth (deep linear only).
    pub depth_curve: Vec<MeanStd>,
    /// Set when the run aborted.
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct Experiment {
    pub rows: Vec<ReportRow>,
    pub runs: Vec<RunRecord>,
    pub curve: Option<Vec<CurveRow>>,
    pub gradcheck: Option<Vec<GradReport>>,
    pub advisories: Vec<Advisory>,
}

impl Experiment {
    pub fn any_diverged(&self) -> bool {
        self.rows.iter().any(|r| r.diverged)
    }

    /// Gradient checks whose worst relative error exceeds `tol`.
    pub fn gradcheck_failures(&self, tol: f64) -> Vec<&GradReport> {
        self.gradcheck.iter().flatten().filter(|r| !(r.max_rel_error < tol)).collect()
    }

    pub fn aggregate(&self, kappa: Option<usize>) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.is_aggregate() && r.kappa == kappa)
    }
}

fn build_corpus(config: &ExperimentConfig, scenario: Scenario, seed: u64) -> Result<(Corpus<f64>, ModelParams<f64>)> {
    let mut rng = seeded_rng(seed);
    let (n, d) = (config.n_entities, config.resolved_dim());
    let corpus = match scenario {
        Scenario::TwohopBridge => build_two_hop(n, d, true, &mut rng)?,
        Scenario::TwohopNobridge => build_two_hop(n, d, false, &mut rng)?,
        _ => build_analogical(n, d, &mut rng)?,
    };
    let params = init_params(d, config.width, config.lambda, config.sigma0, &mut rng)?;
    Ok((corpus, params))
}

fn timing(config: &ExperimentConfig) -> Timing {
    Timing {
        t1: config.t1,
        t2: config.t2,
        t3: config.t3,
        eta_attention: config.eta_attention,
        eta_feature: config.eta_feature,
    }
}

/// End-to-end curricula: every stage trains all groups.
pub fn end_to_end_schedule(regime: EndToEndRegime, kappa: usize, iterations: usize, eta: f64) -> Schedule {
    let phase = |recipe, kappa| Phase { recipe, kappa, stages: vec![Stage::new(Groups::ALL, iterations, eta)] };
    let phases = match regime {
        EndToEndRegime::Joint => vec![phase(Recipe::JointAnalogical, kappa)],
        EndToEndRegime::LateAttribution => vec![phase(Recipe::Phase1S1S2, 1), phase(Recipe::Phase2S3, 1)],
        EndToEndRegime::LateSimilarity => vec![phase(Recipe::Phase1S1S3, 1), phase(Recipe::Phase2S2, 1)],
    };
    Schedule { phases }
}

/// The schedule a model scenario runs with multiplicity `kappa`.
pub fn scenario_schedule(config: &ExperimentConfig, scenario: Scenario, kappa: usize) -> Result<Schedule> {
    let t = timing(config);
    Ok(match scenario {
        Scenario::Joint => Schedule::layerwise(Recipe::JointAnalogical, kappa, &t),
        Scenario::TwohopBridge => Schedule::layerwise(Recipe::JointTwohopBridge, kappa, &t),
        Scenario::TwohopNobridge => Schedule::layerwise(Recipe::JointTwohopNobridge, kappa, &t),
        Scenario::SThenA => Schedule::sequential(Order::SThenA, &t),
        Scenario::AThenS => Schedule::sequential(Order::AThenS, &t),
        Scenario::EndToEnd => end_to_end_schedule(config.regime, kappa, config.iterations, config.eta_end_to_end),
        Scenario::KappaSweep => match config.sweep_mode {
            SweepMode::EndToEnd => {
                end_to_end_schedule(EndToEndRegime::Joint, kappa, config.iterations, config.eta_end_to_end)
            }
            SweepMode::Layerwise => Schedule::layerwise(Recipe::JointAnalogical, kappa, &t),
        },
        Scenario::DeepLinear | Scenario::Gradcheck => {
            return Err(Error::Config { field: "scenario".into(), reason: format!("{scenario} has no schedule") })
        }
    })
}

fn empty_record(seed: u64, kappa: Option<usize>) -> RunRecord {
    RunRecord {
        seed,
        kappa,
        snapshots: Vec::new(),
        similarities: Vec::new(),
        test_error: None,
        final_train_loss: None,
        diagnostics: Vec::new(),
        depth_curve: Vec::new(),
        error: None,
    }
}

fn blank_row(scenario: Scenario, seed: Option<u64>, kappa: Option<usize>) -> ReportRow {
    ReportRow {
        scenario: scenario.name().to_owned(),
        seed,
        kappa,
        train_loss: None,
        feature_sim_mean: None,
        feature_sim_std: None,
        success_rate_mean: None,
        success_rate_std: None,
        runtime_s: 0.0,
        diverged: false,
    }
}

fn run_model_seed(config: &ExperimentConfig, kappa: usize, seed: u64) -> Result<(ReportRow, RunRecord)> {
    let scenario = config.scenario;
    let schedule = scenario_schedule(config, scenario, kappa)?;
    let (corpus, params) = build_corpus(config, scenario, seed)?;
    let layerwise = schedule.phases.iter().flat_map(|p| &p.stages).any(|s| s.groups == Groups::ATTENTION);
    let options = TrainOptions {
        activation: config.activation,
        log_every: config.log_every,
        divergence_limit: config.divergence_limit,
        track_span: layerwise,
        snapshot_at_logs: layerwise,
        ..Default::default()
    };
    // sequential and late curricula train each set once
    let uses_kappa = match scenario {
        Scenario::SThenA | Scenario::AThenS => false,
        Scenario::EndToEnd => config.regime == EndToEndRegime::Joint,
        _ => true,
    };
    let kappa_col = uses_kappa.then_some(kappa);
    let start = Instant::now();
    let outcome = run_schedule(&corpus, params, &schedule, &options);
    let elapsed = if config.timing { start.elapsed().as_secs_f64() } else { 0.0 };
    let mut row = blank_row(scenario, Some(seed), kappa_col);
    row.runtime_s = elapsed;
    let mut record = empty_record(seed, kappa_col);
    match outcome {
        Ok(res) => {
            let sim = res.feature_sim();
            row.train_loss = Some(res.final_train_loss);
            row.feature_sim_mean = Some(sim.mean);
            row.feature_sim_std = Some(sim.std);
            row.success_rate_mean = Some(100.0 * res.success_rate());
            row.success_rate_std = Some(0.0);
            record.snapshots = res.snapshots;
            record.similarities = res.similarities;
            record.test_error = Some(res.test_error);
            record.final_train_loss = Some(res.final_train_loss);
            record.diagnostics = res.diagnostics;
            info!(
                "{scenario} seed {seed} kappa {kappa_col:?}: loss {:.4e}, similarity {:.4}, success {:.1}%",
                res.final_train_loss,
                sim.mean,
                100.0 * (1.0 - res.test_error)
            );
        }
        Err(e @ Error::Divergence { .. }) => {
            warn!("{scenario} seed {seed} kappa {kappa_col:?}: {e}");
            row.diverged = true;
            record.error = Some(e.to_string());
        }
        Err(e) => return Err(e),
    }
    Ok((row, record))
}

fn run_linear_seed(config: &ExperimentConfig, seed: u64) -> Result<(ReportRow, RunRecord)> {
    let cfg = DeepLinearConfig {
        dim: config.resolved_dim(),
        depth: config.depth,
        samples: config.samples,
        eta: config.eta_linear,
        iterations: config.linear_iterations,
    };
    let start = Instant::now();
    let run = train_layerwise_linear::<f64>(&cfg, &mut seeded_rng(seed))?;
    let mut row = blank_row(Scenario::DeepLinear, Some(seed), None);
    row.runtime_s = if config.timing { start.elapsed().as_secs_f64() } else { 0.0 };
    let last = run.curve.last().expect("curve has depth 0").sim;
    row.train_loss = run.stage_losses.last().copied();
    row.feature_sim_mean = Some(last.mean);
    row.feature_sim_std = Some(last.std);
    let mut record = empty_record(seed, None);
    record.depth_curve = run.curve.iter().map(|p| p.sim).collect();
    record.final_train_loss = row.train_loss;
    info!(
        "deep_linear seed {seed}: similarity by depth {:?}",
        record.depth_curve.iter().map(|s| (s.mean * 1e4).round() / 1e4).collect::<Vec<_>>()
    );
    Ok((row, record))
}

/// Mean over seeds of each per-seed value, and the sample std of the
/// per-seed means (not of the within-seed spreads).
fn aggregate_row(scenario: Scenario, kappa: Option<usize>, rows: &[&ReportRow]) -> ReportRow {
    let mut agg = blank_row(scenario, None, kappa);
    let ok: Vec<&&ReportRow> = rows.iter().filter(|r| !r.diverged).collect();
    let stat = |f: &dyn Fn(&ReportRow) -> Option<f64>| {
        let vals: Vec<f64> = ok.iter().filter_map(|r| f(r)).collect();
        (!vals.is_empty()).then(|| MeanStd::of(&vals))
    };
    agg.train_loss = stat(&|r| r.train_loss).map(|s| s.mean);
    if let Some(s) = stat(&|r| r.feature_sim_mean) {
        agg.feature_sim_mean = Some(s.mean);
        agg.feature_sim_std = Some(s.std);
    }
    if let Some(s) = stat(&|r| r.success_rate_mean) {
        agg.success_rate_mean = Some(s.mean);
        agg.success_rate_std = Some(s.std);
    }
    agg.runtime_s = rows.iter().map(|r| r.runtime_s).sum::<f64>() / rows.len().max(1) as f64;
    agg
}

fn advisories_for(config: &ExperimentConfig) -> Result<Vec<Advisory>> {
    let (corpus, _) = build_corpus(config, config.scenario, config.seed_list()[0])?;
    let kappa = match config.scenario {
        Scenario::KappaSweep => config.kappas.iter().copied().max().unwrap_or(1),
        _ => config.kappa,
    };
    let recipe = match config.scenario {
        Scenario::SThenA => Recipe::Phase1S1S2,
        Scenario::AThenS => Recipe::Phase1S1S3,
        _ => joint_recipe(corpus.task),
    };
    let n = assemble_train(&corpus, recipe, kappa)?.effective_size();
    let eta = config.eta_attention.max(config.eta_feature).max(match config.scenario {
        Scenario::EndToEnd | Scenario::KappaSweep => config.eta_end_to_end,
        _ => 0.0,
    });
    Ok(condition_advisories(
        config.resolved_dim(),
        config.width,
        n,
        config.n_entities,
        config.lambda,
        config.sigma0,
        eta,
        0.1,
    ))
}

/// Runs every seed (in parallel) and assembles sorted rows.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Experiment> {
    config.validate()?;
    let seeds = config.seed_list();
    let mut exp = Experiment::default();
    match config.scenario {
        Scenario::Gradcheck => {
            let mut jobs = Vec::new();
            for &d in &config.grad_dims {
                for &m in &config.grad_widths {
                    for i in 0..config.grad_seeds as u64 {
                        jobs.push((d, m, config.seed + i));
                    }
                }
            }
            let reports: Vec<Vec<GradReport>> = jobs
                .par_iter()
                .map(|&(d, m, seed)| check_random(d, m, seed, config.h, config.precision))
                .collect::<Result<_>>()?;
            exp.gradcheck = Some(reports.into_iter().flatten().collect());
            return Ok(exp);
        }
        Scenario::DeepLinear => {
            let results: Vec<(ReportRow, RunRecord)> =
                seeds.par_iter().map(|&s| run_linear_seed(config, s)).collect::<Result<_>>()?;
            let depths = results[0].1.depth_curve.len();
            let curve = (0..depths)
                .map(|k| {
                    let means: Vec<f64> = results.iter().map(|(_, r)| r.depth_curve[k].mean).collect();
                    let s = MeanStd::of(&means);
                    CurveRow { depth: k, sim_mean: s.mean, sim_std: s.std }
                })
                .collect();
            exp.curve = Some(curve);
            for (row, rec) in results {
                exp.rows.push(row);
                exp.runs.push(rec);
            }
        }
        _ => {
            exp.advisories = advisories_for(config)?;
            log_advisories(&exp.advisories);
            let kappas = match config.scenario {
                Scenario::KappaSweep => config.kappas.clone(),
                _ => vec![config.kappa],
            };
            let jobs: Vec<(usize, u64)> = kappas.iter().flat_map(|&k| seeds.iter().map(move |&s| (k, s))).collect();
            let results: Vec<(ReportRow, RunRecord)> =
                jobs.par_iter().map(|&(k, s)| run_model_seed(config, k, s)).collect::<Result<_>>()?;
            for (row, rec) in results {
                exp.rows.push(row);
                exp.runs.push(rec);
            }
        }
    }
    let mut groups: Vec<Option<usize>> = exp.rows.iter().map(|r| r.kappa).collect();
    groups.dedup();
    for kappa in groups {
        let members: Vec<&ReportRow> = exp.rows.iter().filter(|r| r.kappa == kappa).collect();
        let agg = aggregate_row(config.scenario, kappa, &members);
        exp.rows.push(agg);
    }
    exp.rows.sort_by_key(ReportRow::sort_key);
    exp.runs.sort_by_key(|r| (r.kappa, r.seed));
    Ok(exp)
}

/// Writes the report, any curve or gradient-check table, and the resolved
/// config next to `out`.
pub fn write_outputs(exp: &Experiment, config: &ExperimentConfig, out: &Path) -> Result<()> {
    let ext = match config.format {
        Format::Csv => "csv",
        Format::Json => "json",
    };
    if let Some(reports) = &exp.gradcheck {
        report::write_text(out, &report::render_gradcheck(reports, config.format)?)?;
    } else {
        emit_report(&exp.rows, config.format, out)?;
    }
    if let Some(curve) = &exp.curve {
        report::write_text(&report::sibling_path(out, "curve", ext), &report::render_curve(curve, config.format)?)?;
    }
    report::write_text(&report::sibling_path(out, "config", "toml"), &config.resolved().to_toml_string())?;
    Ok(())
}

/// The main table as text, for printing when no output path is given.
pub fn render(exp: &Experiment, format: Format) -> Result<String> {
    match &exp.gradcheck {
        Some(reports) => report::render_gradcheck(reports, format),
        None => report::render_rows(&exp.rows, format),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(scenario: Scenario) -> ExperimentConfig {
        ExperimentConfig {
            scenario,
            n_entities: 4,
            dim: Some(16),
            width: 3,
            t1: 15,
            t2: 15,
            t3: 15,
            iterations: 15,
            reps: 3,
            ..Default::default()
        }
    }

    #[test]
    fn aggregate_row_is_mean_and_sample_std_of_seeds() {
        let exp = run_experiment(&tiny(Scenario::Joint)).unwrap();
        assert_eq!(exp.rows.len(), 4);
        let seeds: Vec<&ReportRow> = exp.rows[..3].iter().collect();
        assert_eq!(seeds.iter().map(|r| r.seed).collect::<Vec<_>>(), vec![Some(1), Some(2), Some(3)]);
        let agg = &exp.rows[3];
        assert!(agg.is_aggregate());
        let sims: Vec<f64> = seeds.iter().map(|r| r.feature_sim_mean.unwrap()).collect();
        let mean = sims.iter().sum::<f64>() / 3.0;
        let var = sims.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / 2.0;
        assert!((agg.feature_sim_mean.unwrap() - mean).abs() < 1e-15);
        assert!((agg.feature_sim_std.unwrap() - var.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn sweep_rows_grouped_by_kappa_with_aggregate_last() {
        let cfg = ExperimentConfig { kappas: vec![5, 1], reps: 2, ..tiny(Scenario::KappaSweep) };
        let exp = run_experiment(&cfg).unwrap();
        let keys: Vec<(Option<usize>, Option<u64>)> = exp.rows.iter().map(|r| (r.kappa, r.seed)).collect();
        assert_eq!(
            keys,
            vec![(Some(1), Some(1)), (Some(1), Some(2)), (Some(1), None), (Some(5), Some(1)), (Some(5), Some(2)), (Some(5), None)]
        );
    }

    #[test]
    fn sequential_rows_have_no_kappa() {
        let exp = run_experiment(&ExperimentConfig { reps: 1, ..tiny(Scenario::AThenS) }).unwrap();
        assert!(exp.rows.iter().all(|r| r.kappa.is_none()));
        assert!(exp.aggregate(None).is_some());
    }

    #[test]
    fn diverged_seeds_are_kept_but_not_averaged() {
        let agg = aggregate_row(
            Scenario::Joint,
            Some(3),
            &[
                &ReportRow { train_loss: Some(1.0), feature_sim_mean: Some(0.5), ..blank_row(Scenario::Joint, Some(1), Some(3)) },
                &ReportRow { diverged: true, ..blank_row(Scenario::Joint, Some(2), Some(3)) },
            ],
        );
        assert_eq!(agg.train_loss, Some(1.0));
        assert_eq!(agg.feature_sim_mean, Some(0.5));
        assert_eq!(agg.feature_sim_std, Some(0.0));
        assert_eq!(agg.success_rate_mean, None);
    }

    #[test]
    fn deep_linear_curve_spans_every_depth() {
        let cfg = ExperimentConfig { dim: Some(32), depth: 4, samples: 8, reps: 2, ..tiny(Scenario::DeepLinear) };
        let exp = run_experiment(&cfg).unwrap();
        let curve = exp.curve.unwrap();
        assert_eq!(curve.iter().map(|c| c.depth).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        assert!(curve[0].sim_mean.abs() < 1e-12);
    }

    #[test]
    fn gradcheck_scenario_reports_each_group() {
        let cfg = ExperimentConfig { grad_dims: vec![4], grad_widths: vec![1, 2], grad_seeds: 2, ..tiny(Scenario::Gradcheck) };
        let exp = run_experiment(&cfg).unwrap();
        assert_eq!(exp.gradcheck.as_ref().unwrap().len(), 2 * 2 * 3);
        assert!(exp.gradcheck_failures(1e-6).is_empty());
        assert!(exp.rows.is_empty());
    }
}
