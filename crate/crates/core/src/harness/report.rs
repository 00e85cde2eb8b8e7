//! Report rows and their CSV/JSON serialization.
//!
//! Numbers are written with 17 significant digits so that parsing a report
//! recovers every value bit for bit. Missing values (metrics that do not
//! apply, or runs that diverged) are empty CSV cells and JSON `null`s.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::Format;
use crate::error::{Error, Result};
use crate::gradcheck::GradReport;

pub const COLUMNS: [&str; 9] = [
    "scenario",
    "seed",
    "kappa",
    "train_loss",
    "feature_sim_mean",
    "feature_sim_std",
    "success_rate_mean",
    "success_rate_std",
    "runtime_s",
];

pub const CURVE_COLUMNS: [&str; 3] = ["depth", "sim_mean", "sim_std"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub scenario: String,
    /// `None` marks the aggregate row (written as `ALL`).
    pub seed: Option<u64>,
    pub kappa: Option<usize>,
    pub train_loss: Option<f64>,
    pub feature_sim_mean: Option<f64>,
    pub feature_sim_std: Option<f64>,
    /// Percent.
    pub success_rate_mean: Option<f64>,
    pub success_rate_std: Option<f64>,
    pub runtime_s: f64,
    /// Not serialized; set when training aborted.
    #[serde(skip)]
    pub diverged: bool,
}

impl ReportRow {
    pub fn is_aggregate(&self) -> bool {
        self.seed.is_none()
    }

    /// Ordering key: scenario, then kappa, then seed with the aggregate row
    /// last.
    pub fn sort_key(&self) -> (String, Option<usize>, bool, u64) {
        (self.scenario.clone(), self.kappa, self.seed.is_none(), self.seed.unwrap_or(0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub depth: usize,
    pub sim_mean: f64,
    pub sim_std: f64,
}

/// 17 significant digits.
pub fn fmt_num(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        format!("{x}")
    }
}

fn opt_num(x: Option<f64>) -> Option<String> {
    x.filter(|v| v.is_finite()).map(fmt_num)
}

fn row_cells(r: &ReportRow) -> [Option<String>; 9] {
    [
        Some(r.scenario.clone()),
        Some(r.seed.map_or_else(|| "ALL".to_owned(), |s| s.to_string())),
        r.kappa.map(|k| k.to_string()),
        opt_num(r.train_loss),
        opt_num(r.feature_sim_mean),
        opt_num(r.feature_sim_std),
        opt_num(r.success_rate_mean),
        opt_num(r.success_rate_std),
        Some(fmt_num(r.runtime_s)),
    ]
}

fn csv_text(header: &[&str], rows: impl Iterator<Item = Vec<Option<String>>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for cells in rows {
        w.write_record(cells.iter().map(|c| c.as_deref().unwrap_or("")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// JSON array of flat objects; `numeric[i]` says whether column `i` is a
/// number (written bare) or a string.
fn json_text(header: &[&str], numeric: &[bool], rows: impl Iterator<Item = Vec<Option<String>>>) -> String {
    let mut out = String::from("[");
    for (n, cells) in rows.enumerate() {
        out.push_str(if n == 0 { "\n  {" } else { ",\n  {" });
        for (i, (key, cell)) in header.iter().zip(&cells).enumerate() {
            if i > 0 {
                out.push_str(", ");
            }
            let value = match cell {
                None => "null".to_owned(),
                Some(v) if numeric[i] => v.clone(),
                Some(v) => serde_json::to_string(v).expect("string serializes"),
            };
            let _ = write!(out, "\"{key}\": {value}");
        }
        out.push('}');
    }
    out.push_str(if out.len() > 1 { "\n]\n" } else { "]\n" });
    out
}

pub fn render_rows(rows: &[ReportRow], format: Format) -> Result<String> {
    let cells = rows.iter().map(|r| row_cells(r).to_vec());
    match format {
        Format::Csv => csv_text(&COLUMNS, cells),
        Format::Json => {
            // seed is a string because of `ALL`
            let numeric = [false, false, true, true, true, true, true, true, true];
            Ok(json_text(&COLUMNS, &numeric, cells))
        }
    }
}

pub fn render_curve(curve: &[CurveRow], format: Format) -> Result<String> {
    let cells = curve.iter().map(|c| vec![Some(c.depth.to_string()), Some(fmt_num(c.sim_mean)), Some(fmt_num(c.sim_std))]);
    match format {
        Format::Csv => csv_text(&CURVE_COLUMNS, cells),
        Format::Json => Ok(json_text(&CURVE_COLUMNS, &[true, true, true], cells)),
    }
}

pub const GRAD_COLUMNS: [&str; 10] = [
    "d",
    "m",
    "seed",
    "h",
    "group",
    "max_rel_error",
    "worst_coordinate",
    "max_abs_closed",
    "max_abs_numeric",
    "small_regime",
];

pub fn render_gradcheck(reports: &[GradReport], format: Format) -> Result<String> {
    let cells = reports.iter().map(|r| {
        let coord = r.worst_coordinate.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(":");
        vec![
            Some(r.config.d.to_string()),
            Some(r.config.m.to_string()),
            r.config.seed.map(|s| s.to_string()),
            Some(fmt_num(r.config.h)),
            Some(r.group.clone()),
            Some(fmt_num(r.max_rel_error)),
            Some(coord),
            Some(fmt_num(r.max_abs_closed)),
            Some(fmt_num(r.max_abs_numeric)),
            Some(r.small_regime.to_string()),
        ]
    });
    match format {
        Format::Csv => csv_text(&GRAD_COLUMNS, cells),
        Format::Json => {
            let numeric = [true, true, true, true, false, true, false, true, true, true];
            Ok(json_text(&GRAD_COLUMNS, &numeric, cells))
        }
    }
}

/// Writes `text` to `path`, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

/// Writes the rows; an empty row list is an error.
pub fn emit_report(rows: &[ReportRow], format: Format, path: &Path) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::EmptySet);
    }
    write_text(path, &render_rows(rows, format)?)
}

/// `<out>` with its extension replaced by `<tag>.<ext>`, e.g.
/// `runs/dl.csv` -> `runs/dl.curve.csv`.
pub fn sibling_path(out: &Path, tag: &str, ext: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.{tag}.{ext}"))
}

/// Parses a CSV report back into rows.
pub fn parse_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    if header != COLUMNS {
        return Err(Error::Config { field: "header".into(), reason: format!("unexpected columns {header:?}") });
    }
    let num = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| Error::Config { field: "value".into(), reason: format!("`{s}`") })
        }
    };
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let seed = match &rec[1] {
            "ALL" => None,
            s => Some(s.parse().map_err(|_| Error::Config { field: "seed".into(), reason: s.to_owned() })?),
        };
        let kappa = match &rec[2] {
            "" => None,
            s => Some(s.parse().map_err(|_| Error::Config { field: "kappa".into(), reason: s.to_owned() })?),
        };
        rows.push(ReportRow {
            scenario: rec[0].to_owned(),
            seed,
            kappa,
            train_loss: num(&rec[3])?,
            feature_sim_mean: num(&rec[4])?,
            feature_sim_std: num(&rec[5])?,
            success_rate_mean: num(&rec[6])?,
            success_rate_std: num(&rec[7])?,
            runtime_s: num(&rec[8])?.unwrap_or(0.0),
            diverged: false,
        });
    }
    Ok(rows)
}

/// Parses a JSON report back into rows.
pub fn parse_json(text: &str) -> Result<Vec<ReportRow>> {
    #[derive(Deserialize)]
    struct Raw {
        scenario: String,
        seed: String,
        kappa: Option<usize>,
        train_loss: Option<f64>,
        feature_sim_mean: Option<f64>,
        feature_sim_std: Option<f64>,
        success_rate_mean: Option<f64>,
        success_rate_std: Option<f64>,
        runtime_s: f64,
    }
    let raw: Vec<Raw> = serde_json::from_str(text)?;
    raw.into_iter()
        .map(|r| {
            let seed = match r.seed.as_str() {
                "ALL" => None,
                s => Some(s.parse().map_err(|_| Error::Config { field: "seed".into(), reason: s.to_owned() })?),
            };
            Ok(ReportRow {
                scenario: r.scenario,
                seed,
                kappa: r.kappa,
                train_loss: r.train_loss,
                feature_sim_mean: r.feature_sim_mean,
                feature_sim_std: r.feature_sim_std,
                success_rate_mean: r.success_rate_mean,
                success_rate_std: r.success_rate_std,
                runtime_s: r.runtime_s,
                diverged: false,
            })
        })
        .collect()
}
