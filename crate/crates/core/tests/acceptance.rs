//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs everything by default. Pass criterion numbers to run a subset:
//! `cargo test --release --test acceptance -- 1 7 10`.

use std::io::Write;
use std::process::ExitCode;
use std::time::Instant;

use analogy_core::datasets::{assemble_train, build_analogical, Recipe, TrainMultiset};
use analogy_core::embeddings::{init_params, seeded_rng};
use analogy_core::harness::{
    run_experiment, write_outputs, EndToEndRegime, Experiment, ExperimentConfig, Format, ReportRow, Scenario,
};
use analogy_core::metrics::{cosine, error_from_margins, feature_similarity, SpanProjector};
use analogy_core::model::{forward, is_correct, loss_from_logits, Prompt};
use analogy_core::training::{gd_step, run_joint, Timing, TrainOptions};
use analogy_core::{Activation, Groups};
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn config(scenario: Scenario) -> ExperimentConfig {
    ExperimentConfig { scenario, ..Default::default() }
}

fn run(cfg: &ExperimentConfig) -> Experiment {
    run_experiment(cfg).unwrap_or_else(|e| panic!("{} failed: {e}", cfg.scenario))
}

fn agg(exp: &Experiment, kappa: Option<usize>) -> &ReportRow {
    exp.aggregate(kappa).expect("aggregate row")
}

fn summary(r: &ReportRow) -> String {
    format!(
        "success {:.2}%, similarity {:.4} ± {:.1e}, loss {:.2e}",
        r.success_rate_mean.unwrap_or(f64::NAN),
        r.feature_sim_mean.unwrap_or(f64::NAN),
        r.feature_sim_std.unwrap_or(f64::NAN),
        r.train_loss.unwrap_or(f64::NAN)
    )
}

fn success(r: &ReportRow) -> f64 {
    r.success_rate_mean.unwrap_or(f64::NAN)
}

fn sim(r: &ReportRow) -> f64 {
    r.feature_sim_mean.unwrap_or(f64::NAN)
}

/// Reduced scale for ReLU runs, whose per-neuron feature layer costs
/// `m` times more per step than the identity model.
fn relu_desk(regime: EndToEndRegime) -> ExperimentConfig {
    ExperimentConfig {
        scenario: Scenario::EndToEnd,
        regime,
        kappa: 1,
        activation: Activation::Relu,
        n_entities: 30,
        dim: Some(128),
        ..Default::default()
    }
}

fn max_stage1_span(exp: &Experiment) -> (f64, usize) {
    let vals: Vec<f64> =
        exp.runs.iter().flat_map(|r| &r.snapshots).filter(|s| s.when > 0).filter_map(|s| s.span_residual).collect();
    (vals.iter().copied().fold(0.0, f64::max), vals.len())
}

#[derive(Default)]
struct Layerwise {
    joint: Option<Experiment>,
    s_then_a: Option<Experiment>,
    a_then_s: Option<Experiment>,
    bridge: Option<Experiment>,
    nobridge: Option<Experiment>,
}

impl Layerwise {
    fn all(&self) -> impl Iterator<Item = &Experiment> {
        [&self.joint, &self.s_then_a, &self.a_then_s, &self.bridge, &self.nobridge].into_iter().flatten()
    }
}

fn gradient_correctness() -> Verdict {
    let cfg = config(Scenario::Gradcheck);
    let exp = run(&cfg);
    let reports = exp.gradcheck.as_ref().expect("gradcheck reports");
    let configs = cfg.grad_dims.len() * cfg.grad_widths.len() * cfg.grad_seeds;
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let failures = exp.gradcheck_failures(1e-6).len();
    verdict(
        configs >= 100 && failures == 0,
        format!("{configs} configurations, worst relative error {worst:.2e} (< 1e-6), {failures} failing groups"),
    )
}

fn joint_training(lw: &mut Layerwise) -> Verdict {
    let exp = run(&config(Scenario::Joint));
    let r = agg(&exp, Some(3)).clone();
    let worst_loss = exp.runs.iter().filter_map(|x| x.final_train_loss).fold(0.0, f64::max);
    lw.joint = Some(exp);
    verdict(
        success(&r) >= 99.0 && sim(&r) >= 0.85 && worst_loss <= 0.01,
        format!("{} (worst seed loss {worst_loss:.2e})", summary(&r)),
    )
}

fn curriculum_asymmetry(lw: &mut Layerwise) -> Verdict {
    let sa = run(&config(Scenario::SThenA));
    let as_ = run(&config(Scenario::AThenS));
    let (a, b) = (agg(&sa, None).clone(), agg(&as_, None).clone());
    lw.s_then_a = Some(sa);
    lw.a_then_s = Some(as_);
    verdict(
        success(&a) >= 99.0 && sim(&a) >= 0.9 && success(&b) <= 5.0 && sim(&b).abs() <= 0.1,
        format!("S then A: {}; A then S: {}", summary(&a), summary(&b)),
    )
}

fn bridge_necessity(lw: &mut Layerwise) -> Verdict {
    let with = run(&config(Scenario::TwohopBridge));
    let without = run(&config(Scenario::TwohopNobridge));
    let (a, b) = (agg(&with, Some(3)).clone(), agg(&without, Some(3)).clone());
    lw.bridge = Some(with);
    lw.nobridge = Some(without);
    verdict(
        success(&a) >= 99.0 && sim(&a) >= 0.85 && success(&b) <= 5.0 && sim(&b).abs() <= 0.1,
        format!("bridge: {}; no bridge: {}", summary(&a), summary(&b)),
    )
}

fn kappa_monotonicity() -> Verdict {
    let cfg = config(Scenario::KappaSweep);
    let exp = run(&cfg);
    let rows: Vec<&ReportRow> = cfg.kappas.iter().map(|&k| agg(&exp, Some(k))).collect();
    let mut pass = true;
    let mut parts = Vec::new();
    for (k, r) in cfg.kappas.iter().zip(&rows) {
        parts.push(format!("kappa {k}: {:.4} ± {:.1e}", sim(r), r.feature_sim_std.unwrap_or(f64::NAN)));
    }
    for w in rows.windows(2) {
        let gap = sim(w[1]) - sim(w[0]);
        let s0 = w[0].feature_sim_std.unwrap_or(f64::NAN);
        let s1 = w[1].feature_sim_std.unwrap_or(f64::NAN);
        let pooled = ((s0 * s0 + s1 * s1) / 2.0).sqrt();
        pass &= gap > 0.0 && gap > 2.0 * pooled;
        parts.push(format!("gap {gap:.4} vs 2*pooled {:.1e}", 2.0 * pooled));
    }
    verdict(pass, parts.join("; "))
}

fn relu_sanity() -> Verdict {
    let joint = run(&relu_desk(EndToEndRegime::Joint));
    let late = run(&relu_desk(EndToEndRegime::LateSimilarity));
    let (a, b) = (agg(&joint, Some(1)), agg(&late, None));
    verdict(
        success(a) >= 99.0 && success(b) <= 5.0,
        format!("N=30, d=128; joint: {}; late similarity: {}", summary(a), summary(b)),
    )
}

fn deep_linear_alignment() -> Verdict {
    let exp = run(&config(Scenario::DeepLinear));
    let curve = exp.curve.as_ref().expect("depth curve");
    let means: Vec<f64> = curve.iter().map(|c| c.sim_mean).collect();
    let depth0 = exp.runs.iter().map(|r| r.depth_curve[0].mean.abs().max(r.depth_curve[0].std)).fold(0.0, f64::max);
    let monotone = (1..means.len() - 1).all(|k| means[k + 1] >= means[k] - 0.05);
    let last = *means.last().unwrap();
    verdict(
        monotone && last >= 0.3 && depth0 <= 1e-12,
        format!(
            "similarity by depth [{}], depth 0 worst {depth0:.1e}",
            means.iter().map(|m| format!("{m:.4}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

/// Stage-1 residuals from every full-scale layer-wise run, plus a reduced run
/// whose feature layer spans a 5-dimensional subspace so the check can fail.
fn span_diagnostic(lw: &mut Layerwise) -> Verdict {
    if lw.all().next().is_none() {
        lw.joint = Some(run(&config(Scenario::Joint)));
    }
    let (mut worst, mut count) = (0.0f64, 0usize);
    for exp in lw.all() {
        let (w, c) = max_stage1_span(exp);
        worst = worst.max(w);
        count += c;
    }

    let (d, m, rank) = (32, 3, 5);
    let mut rng = seeded_rng(40);
    let corpus = build_analogical::<f64>(6, d, &mut rng).unwrap();
    let mut params = init_params(d, m, 4.0, 0.1, &mut rng).unwrap();
    let basis = init_params(d, 1, 1.0, 1.0, &mut seeded_rng(41)).unwrap().z;
    let coeff = init_params(d * m, 1, 1.0, 0.1, &mut seeded_rng(42)).unwrap().z;
    for k in 0..d {
        for l in 0..m {
            let c = coeff.slice(ndarray::s![k * m + l, ..rank]);
            params.w.slice_mut(ndarray::s![k, l, ..]).assign(&basis.slice(ndarray::s![.., ..rank]).dot(&c));
        }
    }
    let projector = SpanProjector::from_feature_layer(&params.w);
    let outside = projector.relative_residual(basis.column(rank));
    let opts = TrainOptions { track_span: true, snapshot_at_logs: true, log_every: 5, ..Default::default() };
    let timing = Timing { t1: 100, t2: 10, t3: 0, eta_attention: 1.0, eta_feature: 1.0 };
    let res = run_joint(&corpus, params, 2, &timing, &opts).unwrap();
    let reduced: Vec<f64> = res.snapshots.iter().filter(|s| s.when > 0).filter_map(|s| s.span_residual).collect();
    let reduced_worst = reduced.iter().copied().fold(0.0, f64::max);
    verdict(
        count > 0 && worst <= 1e-8 && reduced.len() >= 20 && reduced_worst <= 1e-8 && outside > 0.1,
        format!(
            "full scale: worst {worst:.1e} over {count} snapshots; rank-{} feature layer: worst {reduced_worst:.1e} over {} snapshots (an off-span direction scores {outside:.2})",
            projector.rank(),
            reduced.len()
        ),
    )
}

fn outputs(cfg: &ExperimentConfig, dir: &std::path::Path) -> Vec<Vec<u8>> {
    let mut bytes = Vec::new();
    for (format, ext) in [(Format::Csv, "csv"), (Format::Json, "json")] {
        let cfg = ExperimentConfig { format, ..cfg.clone() };
        let out = dir.join(format!("{}.{ext}", cfg.scenario));
        write_outputs(&run(&cfg), &cfg, &out).unwrap();
        let mut names: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        names.sort();
        for p in names {
            bytes.push(std::fs::read(&p).unwrap());
            std::fs::remove_file(p).unwrap();
        }
    }
    bytes
}

fn determinism() -> Verdict {
    let small = ExperimentConfig { n_entities: 10, dim: Some(40), t1: 60, t2: 120, ..config(Scenario::Joint) };
    let configs = [
        small.clone(),
        ExperimentConfig { scenario: Scenario::SThenA, t3: 60, ..small.clone() },
        ExperimentConfig {
            scenario: Scenario::KappaSweep,
            iterations: 60,
            activation: Activation::Relu,
            n_entities: 6,
            dim: Some(20),
            width: 5,
            ..small.clone()
        },
        config(Scenario::DeepLinear),
        ExperimentConfig { grad_dims: vec![4, 8], grad_seeds: 3, ..config(Scenario::Gradcheck) },
    ];
    let mut files = 0;
    for cfg in &configs {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let (x, y) = (outputs(cfg, a.path()), outputs(cfg, b.path()));
        if x != y {
            return verdict(false, format!("{} reports differ between reruns", cfg.scenario));
        }
        files += x.len();
    }
    verdict(true, format!("{} scenarios, {files} CSV/JSON/config files byte-identical across reruns", configs.len()))
}

fn random_prompt(d: usize, seed: u64, scale: f64) -> Prompt<f64> {
    let t = init_params(d, 1, 1.0, scale, &mut seeded_rng(seed)).unwrap().z;
    Prompt::new(t.row(0).to_owned(), t.row(1).to_owned()).unwrap()
}

fn property_suite() -> Verdict {
    let mut runner = TestRunner::new(PropConfig { cases: 200, failure_persistence: None, ..PropConfig::default() });
    let mut names = Vec::new();
    let mut check = |name: &str, result: Result<(), String>| {
        names.push(match result {
            Ok(()) => Ok(name.to_owned()),
            Err(e) => Err(format!("{name}: {e}")),
        })
    };

    let r = runner.run(&(2usize..12, 1usize..4, any::<u64>(), 0.01f64..3.0, any::<bool>()), |(d, m, seed, scale, relu)| {
        let params = init_params(d, m, 5.0, scale, &mut seeded_rng(seed)).unwrap();
        let act = if relu { Activation::Relu } else { Activation::Identity };
        let tr = forward(&params, &random_prompt(d, seed ^ 1, 1.0), act).unwrap();
        prop_assert!(tr.alpha.iter().all(|&a| a > 0.0));
        prop_assert!((tr.alpha[0] + tr.alpha[1] - 1.0).abs() <= 1e-12);
        prop_assert!((tr.logit.sum() - 1.0).abs() <= 1e-10);
        Ok(())
    });
    check("softmax normalization", r.map_err(|e| e.to_string()));

    let r = runner.run(&(2usize..10, 1usize..4, any::<u64>(), -50.0f64..50.0, -8i32..8), |(d, m, seed, c, k)| {
        let mut params = init_params(d, m, 3.0, 0.5, &mut seeded_rng(seed)).unwrap();
        let prompt = random_prompt(d, seed ^ 2, 1.0);
        let tr = forward(&params, &prompt, Activation::Identity).unwrap();
        let shifted = &tr.f + c;
        let label = (seed as usize) % d;
        let (l0, l1) = (loss_from_logits(tr.f.view(), label).unwrap(), loss_from_logits(shifted.view(), label).unwrap());
        prop_assert!((l0 - l1).abs() <= 1e-12);
        let s = 2f64.powi(k);
        params.w *= s;
        let scaled = forward(&params, &prompt, Activation::Identity).unwrap();
        prop_assert_eq!(scaled.f, &tr.f * s);
        Ok(())
    });
    check("shift invariance and homogeneity", r.map_err(|e| e.to_string()));

    let r = runner.run(&(2usize..16, any::<u64>(), 0.001f64..100.0, -10i32..10), |(d, seed, scale, k)| {
        let t = init_params(d, 1, 1.0, scale, &mut seeded_rng(seed)).unwrap();
        let (u, w) = (t.z.row(0), t.z.row(1));
        let c: f64 = cosine(u, w).unwrap();
        prop_assert!(c.abs() <= 1.0);
        prop_assert_eq!(c, cosine(w, u).unwrap());
        prop_assert!((cosine(u, u).unwrap() - 1.0f64).abs() <= 1e-12);
        let v = t.v.clone();
        let f = feature_similarity(v.view(), u, w).unwrap();
        prop_assert_eq!(f, feature_similarity(v.view(), w, u).unwrap());
        let pow2 = &v * 2f64.powi(k);
        prop_assert_eq!(f, feature_similarity(pow2.view(), u, w).unwrap());
        let any_scale = &v * (scale + 0.5);
        prop_assert!((f - feature_similarity(any_scale.view(), u, w).unwrap()).abs() <= 1e-12);
        let mut e = Array2::<f64>::eye(d);
        e[[0, 0]] = scale;
        prop_assert!(feature_similarity(e.view(), e.row(0), e.row(1)).unwrap().abs() <= 1e-12);
        Ok(())
    });
    check("cosine bounds and symmetry", r.map_err(|e| e.to_string()));

    let r = runner.run(&(any::<u64>(), 0u8..6, any::<bool>()), |(seed, mask, relu)| {
        let groups = [
            Groups { z: true, v: false, w: false },
            Groups { z: false, v: true, w: false },
            Groups::FEATURE,
            Groups::ATTENTION,
            Groups { z: true, v: false, w: true },
            Groups { z: false, v: true, w: true },
        ][mask as usize];
        let act = if relu { Activation::Relu } else { Activation::Identity };
        let corpus = build_analogical::<f64>(2, 8, &mut seeded_rng(seed)).unwrap();
        let set = assemble_train(&corpus, Recipe::JointAnalogical, 2).unwrap();
        let before = init_params(8, 2, 3.0, 0.3, &mut seeded_rng(seed ^ 3)).unwrap();
        let mut p = before.clone();
        for _ in 0..3 {
            gd_step(&mut p, &set, groups, 0.7, act).unwrap();
        }
        prop_assert!(groups.z || p.z == before.z);
        prop_assert!(groups.v || p.v == before.v);
        prop_assert!(groups.w || p.w == before.w);
        Ok(())
    });
    check("group-freezing exactness", r.map_err(|e| e.to_string()));

    let r = runner.run(&(any::<u64>(), 1usize..4), |(seed, kappa)| {
        let corpus = build_analogical::<f64>(2, 8, &mut seeded_rng(seed)).unwrap();
        let weighted = assemble_train(&corpus, Recipe::JointAnalogical, kappa).unwrap();
        let mut flat = Vec::new();
        for (list, k) in &weighted.components {
            for _ in 0..*k {
                flat.extend(list.iter().cloned());
            }
        }
        let flat = TrainMultiset::new(vec![(flat, 1)]).unwrap();
        let mut a = init_params(8, 2, 3.0, 0.3, &mut seeded_rng(seed ^ 4)).unwrap();
        let mut b = a.clone();
        for _ in 0..10 {
            gd_step(&mut a, &weighted, Groups::ALL, 0.5, Activation::Identity).unwrap();
            gd_step(&mut b, &flat, Groups::ALL, 0.5, Activation::Identity).unwrap();
        }
        let gap = (&a.z - &b.z)
            .iter()
            .chain((&a.v - &b.v).iter())
            .chain((&a.w - &b.w).iter())
            .fold(0.0f64, |acc, x| acc.max(x.abs()));
        prop_assert!(gap <= 1e-12, "gap {gap:e}");
        Ok(())
    });
    check("multiplicity equivalence", r.map_err(|e| e.to_string()));

    let r = runner.run(&(2usize..20, any::<u64>(), -5.0f64..5.0), |(d, seed, top)| {
        let mut f: Array1<f64> = init_params(d, 1, 1.0, 1.0, &mut seeded_rng(seed)).unwrap().z.row(0).to_owned();
        f.mapv_inplace(|x| x.min(top - 1e-3));
        let (y, rival) = ((seed as usize) % d, (seed as usize + 1) % d);
        f[y] = top;
        f[rival] = top;
        prop_assert!(!is_correct(f.view(), y));
        prop_assert_eq!(error_from_margins(&[0.0, 1.0]), 0.5);
        f[y] = top + 1e-9;
        prop_assert!(is_correct(f.view(), y));
        Ok(())
    });
    check("argmax ties count as failures", r.map_err(|e| e.to_string()));

    let failed: Vec<&String> = names.iter().filter_map(|n| n.as_ref().err()).collect();
    let passed: Vec<&String> = names.iter().filter_map(|n| n.as_ref().ok()).collect();
    if failed.is_empty() {
        verdict(true, format!("{} properties x 200 cases: {}", passed.len(), passed.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")))
    } else {
        verdict(false, failed.iter().map(|s| s.as_str()).collect::<Vec<_>>().join("; "))
    }
}

fn main() -> ExitCode {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let on = |k: u32| wanted.is_empty() || wanted.contains(&k);
    let mut lw = Layerwise::default();
    let mut failures = 0;
    let mut report = |k: u32, name: &str, f: &mut dyn FnMut() -> Verdict| {
        if !on(k) {
            return;
        }
        let start = Instant::now();
        let v = f();
        let tag = if v.pass { "PASS" } else { "FAIL" };
        if !v.pass {
            failures += 1;
        }
        println!("{tag} [{k}] {name}: {} ({:.0} s)", v.detail, start.elapsed().as_secs_f64());
        std::io::stdout().flush().ok();
    };
    report(1, "gradient correctness", &mut gradient_correctness);
    report(2, "joint training", &mut || joint_training(&mut lw));
    report(3, "curriculum asymmetry", &mut || curriculum_asymmetry(&mut lw));
    report(4, "identity-bridge necessity", &mut || bridge_necessity(&mut lw));
    report(5, "kappa monotonicity", &mut kappa_monotonicity);
    report(6, "end-to-end ReLU", &mut relu_sanity);
    report(7, "deep-linear alignment", &mut deep_linear_alignment);
    report(8, "span diagnostic", &mut || span_diagnostic(&mut lw));
    report(9, "determinism", &mut determinism);
    report(10, "property suite", &mut property_suite);
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criteria failed");
        ExitCode::FAILURE
    }
}
