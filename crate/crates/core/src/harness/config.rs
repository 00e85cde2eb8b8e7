//! Flat experiment configuration.
//!
//! A config file is a single TOML table; every key is optional and falls back
//! to the defaults below. Command-line flags are applied on top.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcheck::Precision;
use crate::model::Activation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Joint,
    SThenA,
    AThenS,
    TwohopBridge,
    TwohopNobridge,
    EndToEnd,
    KappaSweep,
    DeepLinear,
    Gradcheck,
}

impl Scenario {
    pub const ALL: [Scenario; 9] = [
        Scenario::Joint,
        Scenario::SThenA,
        Scenario::AThenS,
        Scenario::TwohopBridge,
        Scenario::TwohopNobridge,
        Scenario::EndToEnd,
        Scenario::KappaSweep,
        Scenario::DeepLinear,
        Scenario::Gradcheck,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Joint => "joint",
            Scenario::SThenA => "s_then_a",
            Scenario::AThenS => "a_then_s",
            Scenario::TwohopBridge => "twohop_bridge",
            Scenario::TwohopNobridge => "twohop_nobridge",
            Scenario::EndToEnd => "end_to_end",
            Scenario::KappaSweep => "kappa_sweep",
            Scenario::DeepLinear => "deep_linear",
            Scenario::Gradcheck => "gradcheck",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.replace('-', "_");
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name().eq_ignore_ascii_case(&key))
            .ok_or_else(|| Error::Config { field: "scenario".into(), reason: format!("unknown scenario `{s}`") })
    }
}

/// Which curriculum an end-to-end run follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndToEndRegime {
    /// kappa copies of (S1 u S2), plus S3
    Joint,
    /// S1 u S2, then S3
    LateAttribution,
    /// S1 u S3, then S2
    LateSimilarity,
}

/// How the kappa sweep trains each run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    EndToEnd,
    Layerwise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            _ => Err(Error::Config { field: "format".into(), reason: format!("`{s}` is neither csv nor json") }),
        }
    }
}

/// Every experiment setting. Defaults follow the one-layer synthetic setup
/// (N = 100, d = 427, m = 50, lambda = 20, sigma0 = 0.03, T1 = 500,
/// T2 = T3 = 2000, kappa = 3).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    /// Entity tuples N.
    pub n_entities: usize,
    /// Embedding dimension; `None` means 427, or 512 for `deep_linear`.
    pub dim: Option<usize>,
    /// Feature-layer width m.
    pub width: usize,
    pub lambda: f64,
    pub sigma0: f64,
    pub kappa: usize,
    pub t1: usize,
    pub t2: usize,
    pub t3: usize,
    pub eta_attention: f64,
    pub eta_feature: f64,
    pub activation: Activation,
    /// End-to-end iterations per phase.
    pub iterations: usize,
    pub eta_end_to_end: f64,
    pub regime: EndToEndRegime,
    pub kappas: Vec<usize>,
    pub sweep_mode: SweepMode,
    /// Layers L of the deep linear network.
    pub depth: usize,
    /// Training inputs n of the deep linear network.
    pub samples: usize,
    pub eta_linear: f64,
    /// Iterations per trained linear layer; `None` means round(n / (eta L)).
    pub linear_iterations: Option<usize>,
    pub grad_dims: Vec<usize>,
    pub grad_widths: Vec<usize>,
    /// Seeds checked for every (d, m) pair.
    pub grad_seeds: usize,
    pub h: f64,
    pub precision: Precision,
    pub grad_tolerance: f64,
    pub seed: u64,
    pub reps: usize,
    /// Explicit seed list; overrides `seed`/`reps` when non-empty.
    pub seeds: Vec<u64>,
    pub log_every: usize,
    pub divergence_limit: f64,
    /// Record wall-clock runtimes; off by default so reruns are
    /// byte-identical.
    pub timing: bool,
    pub out: Option<PathBuf>,
    pub format: Format,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::Joint,
            n_entities: 100,
            dim: None,
            width: 50,
            lambda: 20.0,
            sigma0: 0.03,
            kappa: 3,
            t1: 500,
            t2: 2000,
            t3: 2000,
            eta_attention: DEFAULT_ETA_ATTENTION,
            eta_feature: DEFAULT_ETA_FEATURE,
            activation: Activation::Identity,
            iterations: 1000,
            eta_end_to_end: DEFAULT_ETA_END_TO_END,
            regime: EndToEndRegime::Joint,
            kappas: vec![1, 3, 5],
            sweep_mode: SweepMode::EndToEnd,
            depth: 6,
            samples: 32,
            eta_linear: 0.5,
            linear_iterations: None,
            grad_dims: vec![4, 8, 16],
            grad_widths: vec![1, 3],
            grad_seeds: 17,
            h: 1e-5,
            precision: Precision::DoubleDouble,
            grad_tolerance: 1e-6,
            seed: 1,
            reps: 3,
            seeds: Vec::new(),
            log_every: 10,
            divergence_limit: 1e6,
            timing: false,
            out: None,
            format: Format::Csv,
        }
    }
}

/// Step sizes calibrated at N = 100, d = 427: smaller attention steps leave
/// similarity short after T1 = 500, larger feature steps overshoot early in
/// the feature stage.
pub const DEFAULT_ETA_ATTENTION: f64 = 2.0;
pub const DEFAULT_ETA_FEATURE: f64 = 0.5;
pub const DEFAULT_ETA_END_TO_END: f64 = 2.0;

fn config_err(field: &str, reason: impl Into<String>) -> Error {
    Error::Config { field: field.to_owned(), reason: reason.into() }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| config_err("config", e.message().to_owned()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err("config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn resolved_dim(&self) -> usize {
        self.dim.unwrap_or(if self.scenario == Scenario::DeepLinear { 512 } else { 427 })
    }

    pub fn seed_list(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            (0..self.reps as u64).map(|i| self.seed + i).collect()
        } else {
            self.seeds.clone()
        }
    }

    /// The config with defaults made explicit, as echoed next to reports.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.dim = Some(self.resolved_dim());
        c.seeds = self.seed_list();
        c
    }

    /// Checks the fields the scenario uses.
    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, x: f64| {
            if x > 0.0 && x.is_finite() {
                Ok(())
            } else {
                Err(config_err(field, format!("{x} is not a positive number")))
            }
        };
        let nonzero = |field: &str, x: usize| {
            if x > 0 {
                Ok(())
            } else {
                Err(config_err(field, "must be at least 1"))
            }
        };
        if self.seed_list().is_empty() {
            return Err(config_err("reps", "no seeds to run"));
        }
        let mut sorted = self.seed_list();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(config_err("seeds", "seeds must be distinct"));
        }
        nonzero("log_every", self.log_every)?;
        positive("divergence_limit", self.divergence_limit)?;
        match self.scenario {
            Scenario::Gradcheck => {
                if self.grad_dims.is_empty() || self.grad_widths.is_empty() {
                    return Err(config_err("grad_dims", "need at least one d and one m"));
                }
                for &d in &self.grad_dims {
                    if d < 2 {
                        return Err(config_err("grad_dims", "d must be at least 2"));
                    }
                }
                for &m in &self.grad_widths {
                    nonzero("grad_widths", m)?;
                }
                nonzero("grad_seeds", self.grad_seeds)?;
                if !(1e-7..=1e-3).contains(&self.h) {
                    return Err(config_err("h", format!("{} outside [1e-7, 1e-3]", self.h)));
                }
                positive("grad_tolerance", self.grad_tolerance)?;
            }
            Scenario::DeepLinear => {
                if self.depth < 2 {
                    return Err(config_err("depth", "need at least two layers"));
                }
                nonzero("samples", self.samples)?;
                positive("eta_linear", self.eta_linear)?;
                if self.samples > self.resolved_dim() {
                    return Err(config_err("samples", "more samples than dimensions"));
                }
            }
            _ => {
                nonzero("n_entities", self.n_entities)?;
                nonzero("width", self.width)?;
                nonzero("kappa", self.kappa)?;
                positive("lambda", self.lambda)?;
                positive("sigma0", self.sigma0)?;
                positive("eta_attention", self.eta_attention)?;
                positive("eta_feature", self.eta_feature)?;
                positive("eta_end_to_end", self.eta_end_to_end)?;
                // 2N entity tokens plus three relations
                let needed = 2 * self.n_entities + 3;
                if self.resolved_dim() < needed {
                    return Err(config_err("dim", format!("needs at least {needed} for N = {}", self.n_entities)));
                }
                if self.scenario == Scenario::KappaSweep {
                    if self.kappas.is_empty() {
                        return Err(config_err("kappas", "empty sweep"));
                    }
                    for &k in &self.kappas {
                        nonzero("kappas", k)?;
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.resolved_dim(), 427);
        assert_eq!(c.seed_list(), vec![1, 2, 3]);
    }

    #[test]
    fn flat_keys_parse() {
        let c = ExperimentConfig::from_toml_str(
            "scenario = \"deep_linear\"\nreps = 2\nseed = 7\nactivation = \"relu\"\nformat = \"json\"\n",
        )
        .unwrap();
        assert_eq!(c.scenario, Scenario::DeepLinear);
        assert_eq!(c.resolved_dim(), 512);
        assert_eq!(c.seed_list(), vec![7, 8]);
        assert_eq!(c.activation, Activation::Relu);
        assert_eq!(c.format, Format::Json);
    }

    #[test]
    fn unknown_key_is_a_config_error() {
        let err = ExperimentConfig::from_toml_str("kapa = 3\n").unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
    }

    #[test]
    fn validation_names_the_field() {
        let c = ExperimentConfig { kappa: 0, ..Default::default() };
        match c.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "kappa"),
            other => panic!("{other:?}"),
        }
        let c = ExperimentConfig { dim: Some(50), ..Default::default() };
        assert!(matches!(c.validate(), Err(Error::Config { field, .. }) if field == "dim"));
        let c = ExperimentConfig { reps: 0, ..Default::default() };
        assert!(matches!(c.validate(), Err(Error::Config { field, .. }) if field == "reps"));
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = ExperimentConfig::default().resolved();
        let back = ExperimentConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
    }
}
