use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::error;

use analogy_core::gradcheck::Precision;
use analogy_core::harness::{self, EndToEndRegime, ExperimentConfig, Format, Scenario, SweepMode};
use analogy_core::{Activation, Error};

/// Train the one-layer analogy model and its linear-network companion on
/// synthetic data, and write report tables.
#[derive(Parser)]
#[command(name = "analogy-lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Repeat for more logging (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Analogical reasoning: joint, sequential, or end-to-end training.
    Analogical {
        #[arg(long, value_enum, default_value = "joint")]
        regime: Regime,
        /// Curriculum for `--regime end-to-end`.
        #[arg(long, value_enum)]
        curriculum: Option<Curriculum>,
        #[command(flatten)]
        common: Common,
    },
    /// Two-hop reasoning, with or without the bridge examples.
    TwoHop {
        #[arg(long, overrides_with = "no_bridge")]
        bridge: bool,
        #[arg(long, overrides_with = "bridge")]
        no_bridge: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Similarity as a function of the multiplicity kappa.
    KappaSweep {
        /// Comma-separated multiplicities.
        #[arg(long, value_delimiter = ',')]
        kappas: Option<Vec<usize>>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[command(flatten)]
        common: Common,
    },
    /// Layer-wise training of a deep linear network on orthogonal inputs.
    DeepLinear {
        #[arg(long)]
        depth: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        eta_linear: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Closed-form gradients against central differences.
    Gradcheck {
        #[arg(long)]
        h: Option<f64>,
        #[arg(long, value_enum)]
        precision: Option<Prec>,
        /// Comma-separated dimensions.
        #[arg(long, value_delimiter = ',')]
        dims: Option<Vec<usize>>,
        /// Comma-separated widths.
        #[arg(long, value_delimiter = ',')]
        widths: Option<Vec<usize>>,
        #[arg(long)]
        grad_seeds: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Run whatever scenario the config file names.
    Run {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Regime {
    Joint,
    SThenA,
    AThenS,
    EndToEnd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Curriculum {
    Joint,
    LateAttribution,
    LateSimilarity,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    EndToEnd,
    Layerwise,
}

#[derive(Clone, Copy, ValueEnum)]
enum Prec {
    Double,
    DoubleDouble,
}

#[derive(Clone, Copy, ValueEnum)]
enum Act {
    Identity,
    Relu,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fmt {
    Csv,
    Json,
}

/// Flags shared by every subcommand; each overrides the config file.
#[derive(Args)]
struct Common {
    /// TOML file with experiment settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    reps: Option<usize>,
    /// Report path; the table goes to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<Fmt>,
    #[arg(long)]
    n_entities: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    sigma0: Option<f64>,
    #[arg(long)]
    kappa: Option<usize>,
    #[arg(long)]
    t1: Option<usize>,
    #[arg(long)]
    t2: Option<usize>,
    #[arg(long)]
    t3: Option<usize>,
    #[arg(long)]
    eta_attention: Option<f64>,
    #[arg(long)]
    eta_feature: Option<f64>,
    #[arg(long)]
    eta_end_to_end: Option<f64>,
    /// End-to-end iterations per phase.
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long, value_enum)]
    activation: Option<Act>,
    #[arg(long)]
    log_every: Option<usize>,
    /// Record wall-clock runtimes (reruns are then not byte-identical).
    #[arg(long)]
    timing: bool,
}

macro_rules! set {
    ($cfg:ident, $src:ident, $($field:ident),*) => {
        $(if let Some(v) = $src.$field { $cfg.$field = v; })*
    };
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_file(path)?,
            None => ExperimentConfig::default(),
        };
        set!(cfg, self, seed, reps, n_entities, width, lambda, sigma0, kappa, t1, t2, t3);
        set!(cfg, self, eta_attention, eta_feature, eta_end_to_end, iterations, log_every);
        if self.seed.is_some() || self.reps.is_some() {
            cfg.seeds.clear();
        }
        if self.dim.is_some() {
            cfg.dim = self.dim;
        }
        if self.out.is_some() {
            cfg.out = self.out.clone();
        }
        if let Some(f) = self.format {
            cfg.format = match f {
                Fmt::Csv => Format::Csv,
                Fmt::Json => Format::Json,
            };
        }
        if let Some(a) = self.activation {
            cfg.activation = match a {
                Act::Identity => Activation::Identity,
                Act::Relu => Activation::Relu,
            };
        }
        cfg.timing |= self.timing;
        Ok(cfg)
    }
}

fn build_config(command: Command) -> Result<ExperimentConfig, Error> {
    Ok(match command {
        Command::Analogical { regime, curriculum, common } => {
            let mut cfg = common.load()?;
            cfg.scenario = match regime {
                Regime::Joint => Scenario::Joint,
                Regime::SThenA => Scenario::SThenA,
                Regime::AThenS => Scenario::AThenS,
                Regime::EndToEnd => Scenario::EndToEnd,
            };
            if let Some(c) = curriculum {
                cfg.regime = match c {
                    Curriculum::Joint => EndToEndRegime::Joint,
                    Curriculum::LateAttribution => EndToEndRegime::LateAttribution,
                    Curriculum::LateSimilarity => EndToEndRegime::LateSimilarity,
                };
            }
            cfg
        }
        Command::TwoHop { no_bridge, common, .. } => {
            let mut cfg = common.load()?;
            cfg.scenario = if no_bridge { Scenario::TwohopNobridge } else { Scenario::TwohopBridge };
            cfg
        }
        Command::KappaSweep { kappas, mode, common } => {
            let mut cfg = common.load()?;
            cfg.scenario = Scenario::KappaSweep;
            if let Some(k) = kappas {
                cfg.kappas = k;
            }
            if let Some(m) = mode {
                cfg.sweep_mode = match m {
                    Mode::EndToEnd => SweepMode::EndToEnd,
                    Mode::Layerwise => SweepMode::Layerwise,
                };
            }
            cfg
        }
        Command::DeepLinear { depth, samples, eta_linear, common } => {
            let mut cfg = common.load()?;
            cfg.scenario = Scenario::DeepLinear;
            cfg.depth = depth.unwrap_or(cfg.depth);
            cfg.samples = samples.unwrap_or(cfg.samples);
            cfg.eta_linear = eta_linear.unwrap_or(cfg.eta_linear);
            cfg
        }
        Command::Gradcheck { h, precision, dims, widths, grad_seeds, common } => {
            let mut cfg = common.load()?;
            cfg.scenario = Scenario::Gradcheck;
            cfg.h = h.unwrap_or(cfg.h);
            cfg.grad_seeds = grad_seeds.unwrap_or(cfg.grad_seeds);
            if let Some(d) = dims {
                cfg.grad_dims = d;
            }
            if let Some(w) = widths {
                cfg.grad_widths = w;
            }
            if let Some(p) = precision {
                cfg.precision = match p {
                    Prec::Double => Precision::Double,
                    Prec::DoubleDouble => Precision::DoubleDouble,
                };
            }
            cfg
        }
        Command::Run { common } => common.load()?,
    })
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    let cfg = build_config(cli.command)?;
    let exp = harness::run_experiment(&cfg)?;
    match &cfg.out {
        Some(out) => {
            harness::write_outputs(&exp, &cfg, out)?;
            eprintln!("wrote {}", out.display());
        }
        None => print!("{}", harness::render(&exp, cfg.format)?),
    }
    if exp.gradcheck.is_some() {
        let failures = exp.gradcheck_failures(cfg.grad_tolerance);
        if !failures.is_empty() {
            for f in &failures {
                error!("gradient check failed: {f:?}");
            }
            return Ok(ExitCode::from(4));
        }
    }
    if exp.any_diverged() {
        error!("at least one run diverged; its row has empty metrics");
        return Ok(ExitCode::from(3));
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config { .. } | Error::Io(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
