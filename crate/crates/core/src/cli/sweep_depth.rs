use std::path::PathBuf;

use clap::{Args, ValueEnum};

use super::report::{Check, FitRecord, Report};
use super::{read_x_file, CommonArgs, CoordsArg};
use crate::error::{Error, Result};
use crate::harness::{run_sweep, run_sweep_with, Evaluator, ExperimentPlan, LayerSelection, RateSpec, SweepAxis};
use crate::net::UpdateMode;
use crate::observables::Observable;
use crate::theory::fit_power_law;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Actual,
    Linearized,
}

impl From<ModeArg> for UpdateMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Actual => UpdateMode::Actual,
            ModeArg::Linearized => UpdateMode::Linearized,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SweepDepthArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Sweep the network depth instead, measuring at ℓ = L for each L.
    #[arg(long, value_name = "LIST", value_delimiter = ',')]
    pub depths: Option<Vec<usize>>,
    /// Update used for (Δz)².
    #[arg(long, value_enum, default_value_t = ModeArg::Actual)]
    pub mode: ModeArg,
    #[arg(long, value_enum, default_value_t = CoordsArg::Mean)]
    pub coords: CoordsArg,
    /// Observables to measure and fit; defaults to (Δz)², c and btilde_over_n.
    #[arg(long, value_name = "LIST", value_delimiter = ',')]
    pub observables: Option<Vec<String>>,
    #[arg(long, value_name = "PATH")]
    pub x_file: Option<PathBuf>,
}

const DEFAULT_WIDTH: usize = 256;
/// Deeper than the last measured layer so that no measured layer is the
/// readout-adjacent one.
const DEFAULT_DEPTH: usize = 40;
const DEFAULT_LAYERS: [usize; 4] = [4, 8, 16, 32];
const DEFAULT_ETA: f64 = 1e-3;
const DEFAULT_REPLICATES: usize = 1000;
const MIN_R_SQUARED: f64 = 0.98;

/// Expected exponent and half-width for observables with a known depth law.
pub fn expected_exponent(o: Observable) -> Option<(f64, f64)> {
    match o {
        Observable::DeltaZSq(_) | Observable::DeltaZSqYIntegrated => Some((3.0, 0.4)),
        Observable::C => Some((1.0, 0.2)),
        Observable::BtildeOverWidth => Some((2.0, 0.3)),
        _ => None,
    }
}

pub fn run(args: &SweepDepthArgs) -> Result<Report> {
    run_inner(args, None)
}

/// Same recipe with a substitute per-replicate evaluator.
pub fn run_with(args: &SweepDepthArgs, evaluator: &dyn Evaluator) -> Result<Report> {
    run_inner(args, Some(evaluator))
}

fn run_inner(args: &SweepDepthArgs, evaluator: Option<&dyn Evaluator>) -> Result<Report> {
    let c = &args.common;
    let eta = c.eta_or(DEFAULT_ETA)?;
    let observables: Vec<Observable> = match &args.observables {
        Some(names) => names.iter().map(|s| s.parse()).collect::<Result<_>>()?,
        None => vec![Observable::DeltaZSq(args.mode.into()), Observable::C, Observable::BtildeOverWidth],
    };
    let depth_sweep = args.depths.clone();
    let base_depth = match &depth_sweep {
        Some(d) => *d.first().ok_or_else(|| Error::Config("--depths is empty".into()))?,
        None => c.depth.unwrap_or(DEFAULT_DEPTH),
    };
    if depth_sweep.is_some() && (c.widths.is_some() || c.layers.is_some()) {
        return Err(Error::Config("--depths needs a uniform --width and measures at ℓ = L only".into()));
    }
    let mut common = c.clone();
    common.depth = Some(base_depth);
    let cfg = common.network(DEFAULT_WIDTH, DEFAULT_DEPTH)?;

    let mut plan = ExperimentPlan::new(cfg.clone(), RateSpec::Global(eta), observables.clone(), c.replicates_or(DEFAULT_REPLICATES));
    plan.coords = args.coords.into();
    plan.workers = c.workers;
    if let Some(p) = &args.x_file {
        plan.fixed_input = Some(read_x_file(p, cfg.input_dim())?);
    }
    let against = match &depth_sweep {
        Some(d) => {
            plan.sweep = SweepAxis::Depth(d.clone());
            plan.layers = LayerSelection::Last;
            "depth"
        }
        None => {
            plan.layers = LayerSelection::List(c.layers.clone().unwrap_or_else(|| DEFAULT_LAYERS.to_vec()));
            "layer"
        }
    };
    let out = match evaluator {
        Some(e) => run_sweep_with(&plan, e)?,
        None => run_sweep(&plan)?,
    };

    let mut report = Report::new("sweep-depth");
    report.rows = out.rows.clone();
    report.warnings = out.warnings.clone();
    for &o in &observables {
        let name = o.to_string();
        let points: Vec<(f64, f64)> = out
            .rows
            .iter()
            .filter(|r| r.observable == name)
            .map(|r| (if depth_sweep.is_some() { r.axis_value } else { r.layer as f64 }, r.mean))
            .collect();
        if points.len() < 3 {
            return Err(Error::Fit(format!(
                "{name}: {} point(s) within the network, a fit needs at least 3",
                points.len()
            )));
        }
        let fit = fit_power_law(&points)?;
        report.fits.push(FitRecord::new(name.clone(), against, &fit));
        let replicates = out.rows.iter().map(|r| r.replicates).min().unwrap_or(0);
        if let Some((target, half)) = expected_exponent(o) {
            report.checks.push(
                Check::band(
                    format!("exponent/{name}"),
                    fit.exponent,
                    target - half,
                    target + half,
                    format!("fitted against {against}, expected {target} ± {half}"),
                )
                .with_replicates(replicates),
            );
            if matches!(o, Observable::DeltaZSq(_) | Observable::DeltaZSqYIntegrated) {
                report.checks.push(
                    Check::band(
                        format!("r_squared/{name}"),
                        fit.r_squared,
                        MIN_R_SQUARED,
                        1.0,
                        "log-log linearity",
                    )
                    .with_replicates(replicates),
                );
            }
        }
    }
    Ok(report)
}
