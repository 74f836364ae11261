use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::harness::SweepRow;
use crate::oracle::SuiteReport;
use crate::theory::PowerLawFit;

/// Bumped whenever a column or field changes meaning.
pub const SCHEMA_VERSION: u32 = 1;

/// Checks whose inputs rest on fewer replicates than this are inconclusive.
pub const MIN_REPLICATES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Pass,
    Fail,
    Inconclusive,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Inconclusive => "INCONCLUSIVE",
        })
    }
}

/// One pass/fail decision: `value` against the closed band `[lower, upper]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
    pub status: Status,
    pub detail: String,
}

impl Check {
    pub fn band(name: impl Into<String>, value: f64, lower: f64, upper: f64, detail: impl Into<String>) -> Self {
        let status = if value >= lower && value <= upper {
            Status::Pass
        } else {
            Status::Fail
        };
        Check {
            name: name.into(),
            value,
            lower,
            upper,
            status,
            detail: detail.into(),
        }
    }

    /// Marks the check inconclusive when it rests on too few replicates.
    pub fn with_replicates(mut self, replicates: usize) -> Self {
        if replicates < MIN_REPLICATES {
            self.status = Status::Inconclusive;
            self.detail = format!("{}; only {replicates} replicates", self.detail);
        }
        self
    }

    pub fn passed(&self) -> bool {
        self.status == Status::Pass
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitRecord {
    pub observable: String,
    /// What the fitted abscissa is: `layer`, `depth`, ...
    pub against: String,
    pub exponent: f64,
    pub log_prefactor: f64,
    pub r_squared: f64,
    pub points_used: usize,
}

impl FitRecord {
    pub fn new(observable: impl Into<String>, against: impl Into<String>, fit: &PowerLawFit) -> Self {
        FitRecord {
            observable: observable.into(),
            against: against.into(),
            exponent: fit.exponent,
            log_prefactor: fit.log_prefactor,
            r_squared: fit.r_squared,
            points_used: fit.points_used,
        }
    }
}

/// Everything a subcommand produces. Contains nothing that depends on the
/// worker count, so equal seeds give equal bytes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub schema_version: u32,
    pub command: String,
    pub rows: Vec<SweepRow>,
    pub fits: Vec<FitRecord>,
    pub checks: Vec<Check>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub suites: Vec<SuiteReport>,
    pub warnings: Vec<String>,
}

impl Report {
    pub fn new(command: &str) -> Self {
        Report {
            schema_version: SCHEMA_VERSION,
            command: command.to_string(),
            rows: Vec::new(),
            fits: Vec::new(),
            checks: Vec::new(),
            suites: Vec::new(),
            warnings: Vec::new(),
        }
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn fit(&self, observable: &str) -> Option<&FitRecord> {
        self.fits.iter().find(|f| f.observable == observable)
    }

    pub fn row(&self, observable: &str, layer: usize, axis_value: f64) -> Option<&SweepRow> {
        self.rows.iter().find(|r| {
            r.observable == observable
                && r.layer == layer
                && (r.axis_value == axis_value || (r.axis_value.is_nan() && axis_value.is_nan()))
        })
    }

    /// 1 if any check failed, else 3 if any was inconclusive, else 0.
    pub fn exit_code(&self) -> i32 {
        if self.checks.iter().any(|c| c.status == Status::Fail) {
            1
        } else if self.checks.iter().any(|c| c.status == Status::Inconclusive) {
            3
        } else {
            0
        }
    }

    /// Human-readable summary of fits, checks and warnings.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        for w in &self.warnings {
            s += &format!("warning: {w}\n");
        }
        for f in &self.fits {
            s += &format!(
                "fit {} vs {}: exponent {:.4}, r² {:.4} ({} points)\n",
                f.observable, f.against, f.exponent, f.r_squared, f.points_used
            );
        }
        for c in &self.checks {
            s += &format!(
                "{} {}: {:.6e} in [{:.6e}, {:.6e}]; {}\n",
                c.status, c.name, c.value, c.lower, c.upper, c.detail
            );
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum Format {
    #[default]
    Csv,
    Json,
}

#[derive(Serialize)]
struct SuiteCsvRow<'a> {
    suite: &'a str,
    check: &'a str,
    max_rel_error: f64,
    tolerance: f64,
    worst_net: usize,
    worst_seed: u64,
    comparisons: usize,
    passed: bool,
}

/// CSV: the row table, or the per-check table for gradient suites.
/// JSON: the whole report.
pub fn render(report: &Report, format: Format) -> Result<Vec<u8>> {
    match format {
        Format::Json => {
            let mut buf = serde_json::to_vec_pretty(report)?;
            buf.push(b'\n');
            Ok(buf)
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            if report.suites.is_empty() {
                if report.rows.is_empty() {
                    w.write_record(["axis_name", "axis_value", "observable", "layer", "mean", "stderr", "replicates"])?;
                }
                for r in &report.rows {
                    w.serialize(r)?;
                }
            } else {
                for s in &report.suites {
                    for c in &s.checks {
                        w.serialize(SuiteCsvRow {
                            suite: &s.suite,
                            check: &c.name,
                            max_rel_error: c.max_rel_error,
                            tolerance: c.tolerance,
                            worst_net: c.worst_net,
                            worst_seed: c.worst_seed,
                            comparisons: c.comparisons,
                            passed: c.passed,
                        })?;
                    }
                }
            }
            w.into_inner().map_err(|e| std::io::Error::other(e.to_string()).into())
        }
    }
}

pub fn emit(report: &Report, format: Format, output: Option<&Path>) -> Result<()> {
    let bytes = render(report, format)?;
    match output {
        Some(path) => std::fs::write(path, bytes)?,
        None => std::io::stdout().lock().write_all(&bytes)?,
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report_with(statuses: &[Status]) -> Report {
        let mut r = Report::new("t");
        for (i, &s) in statuses.iter().enumerate() {
            let mut c = Check::band(format!("c{i}"), 0.0, -1.0, 1.0, "");
            c.status = s;
            r.checks.push(c);
        }
        r
    }

    #[test]
    fn exit_codes_rank_failure_over_inconclusive() {
        assert_eq!(report_with(&[]).exit_code(), 0);
        assert_eq!(report_with(&[Status::Pass, Status::Pass]).exit_code(), 0);
        assert_eq!(report_with(&[Status::Pass, Status::Inconclusive]).exit_code(), 3);
        assert_eq!(report_with(&[Status::Inconclusive, Status::Fail]).exit_code(), 1);
    }

    #[test]
    fn band_is_closed_and_rejects_nan() {
        assert!(Check::band("x", 1.0, 0.0, 1.0, "").passed());
        assert!(!Check::band("x", 1.0 + 1e-12, 0.0, 1.0, "").passed());
        assert!(!Check::band("x", f64::NAN, 0.0, 1.0, "").passed());
        let c = Check::band("x", 0.5, 0.0, 1.0, "").with_replicates(2);
        assert_eq!(c.status, Status::Inconclusive);
    }

    #[test]
    fn csv_header_is_fixed_even_without_rows() {
        let out = render(&Report::new("t"), Format::Csv).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "axis_name,axis_value,observable,layer,mean,stderr,replicates\n"
        );
        let mut r = Report::new("t");
        r.rows.push(SweepRow {
            axis_name: "depth".into(),
            axis_value: 8.0,
            observable: "c".into(),
            layer: 8,
            mean: 0.5,
            stderr: 0.25,
            replicates: 10,
        });
        let out = String::from_utf8(render(&r, Format::Csv).unwrap()).unwrap();
        assert_eq!(
            out,
            "axis_name,axis_value,observable,layer,mean,stderr,replicates\ndepth,8.0,c,8,0.5,0.25,10\n"
        );
    }
}
