use clap::{Args, ValueEnum};

use super::report::{Check, FitRecord, Report};
use super::{CommonArgs, CoordsArg};
use crate::error::{Error, Result};
use crate::harness::{
    run_replicated, run_sweep, run_sweep_with, Evaluator, ExperimentPlan, LayerSelection, RateSpec, SweepAxis,
    SweepRow,
};
use crate::net::UpdateMode;
use crate::observables::Observable;
use crate::theory::{fit_power_law, refine_eta_star, solve_eta_star};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Estimator {
    /// Linearized (Δz)² with the target integrated out analytically.
    YIntegrated,
    /// Linearized (Δz)² on the sampled target.
    Linearized,
}

impl Estimator {
    pub fn observable(self) -> Observable {
        match self {
            Estimator::YIntegrated => Observable::DeltaZSqYIntegrated,
            Estimator::Linearized => Observable::DeltaZSq(UpdateMode::Linearized),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SolveLrArgs {
    /// `--eta` is the probe rate (default 1); the linearized mean scales exactly as η².
    #[command(flatten)]
    pub common: CommonArgs,
    /// Depths to solve at; `--depth L` alone means a single depth.
    #[arg(long, value_name = "LIST", value_delimiter = ',')]
    pub depths: Option<Vec<usize>>,
    #[arg(long, value_enum, default_value_t = Estimator::YIntegrated)]
    pub estimator: Estimator,
    #[arg(long, value_enum, default_value_t = CoordsArg::Mean)]
    pub coords: CoordsArg,
    /// Bisect the actual-update mean onto 1 around each estimate.
    #[arg(long)]
    pub refine: bool,
    /// Relative bracket width at which bisection stops.
    #[arg(long, default_value_t = 0.02)]
    pub refine_tol: f64,
}

const DEFAULT_WIDTH: usize = 256;
const DEFAULT_DEPTHS: [usize; 4] = [8, 16, 32, 64];
const DEFAULT_REPLICATES: usize = 1000;
const TARGET_EXPONENT: f64 = -1.5;
const EXPONENT_HALF_WIDTH: f64 = 0.3;

pub fn run(args: &SolveLrArgs) -> Result<Report> {
    run_inner(args, None)
}

/// Same recipe with a substitute per-replicate evaluator.
pub fn run_with(args: &SolveLrArgs, evaluator: &dyn Evaluator) -> Result<Report> {
    run_inner(args, Some(evaluator))
}

fn run_inner(args: &SolveLrArgs, evaluator: Option<&dyn Evaluator>) -> Result<Report> {
    let c = &args.common;
    let eta0 = c.eta_or(1.0)?;
    let depths = match (&args.depths, c.depth) {
        (Some(d), _) => d.clone(),
        (None, Some(d)) => vec![d],
        (None, None) => DEFAULT_DEPTHS.to_vec(),
    };
    if depths.is_empty() {
        return Err(Error::Config("--depths is empty".into()));
    }
    if c.widths.is_some() || c.layers.is_some() {
        return Err(Error::Config("solve-lr takes a uniform --width and solves at ℓ = L".into()));
    }
    let mut common = c.clone();
    common.depth = Some(depths[0]);
    let cfg = common.network(DEFAULT_WIDTH, depths[0])?;
    let obs = args.estimator.observable();

    let mut plan = ExperimentPlan::new(cfg, RateSpec::Global(eta0), vec![obs], c.replicates_or(DEFAULT_REPLICATES));
    plan.coords = args.coords.into();
    plan.workers = c.workers;
    plan.layers = LayerSelection::Last;
    plan.sweep = SweepAxis::Depth(depths.clone());
    let out = match evaluator {
        Some(e) => run_sweep_with(&plan, e)?,
        None => run_sweep(&plan)?,
    };

    let mut report = Report::new("solve-lr");
    report.rows = out.rows.clone();
    report.warnings = out.warnings.clone();
    let mut points = Vec::new();
    for (point, &depth) in out.points.iter().zip(&depths) {
        let e = point.estimate(obs, depth).expect("measured at ℓ = L");
        let eta_star = eta0 * solve_eta_star(e)?;
        report.rows.push(SweepRow {
            axis_name: "depth".into(),
            axis_value: depth as f64,
            observable: "eta_star".into(),
            layer: depth,
            mean: eta_star,
            // Delta method on η* ∝ mean^{-1/2}.
            stderr: 0.5 * eta_star * e.stderr / e.mean,
            replicates: e.replicates,
        });
        points.push((depth as f64, eta_star));

        if args.refine {
            let mut p = plan.clone();
            p.sweep = SweepAxis::None;
            p.config = crate::net::NetworkConfig::uniform(p.config.width(1), depth, 1)?
                .with_variant(plan.config.init_variant)
                .with_seed(plan.config.master_seed);
            p.observables = vec![Observable::DeltaZSq(UpdateMode::Actual)];
            let refined = refine_eta_star(eta_star, 1.0, args.refine_tol, |eta| {
                p.rates = RateSpec::Global(eta);
                Ok(run_replicated(&p)?.estimates[0].mean)
            });
            match refined {
                Ok(r) => report.rows.push(SweepRow {
                    axis_name: "depth".into(),
                    axis_value: depth as f64,
                    observable: "eta_star_refined".into(),
                    layer: depth,
                    mean: r.eta_star,
                    stderr: f64::NAN,
                    replicates: p.replicates,
                }),
                Err(e) => report.warnings.push(format!("refinement at L = {depth}: {e}")),
            }
        }
    }
    if points.len() >= 3 {
        let fit = fit_power_law(&points)?;
        report.fits.push(FitRecord::new("eta_star", "depth", &fit));
        report.checks.push(
            Check::band(
                "exponent/eta_star",
                fit.exponent,
                TARGET_EXPONENT - EXPONENT_HALF_WIDTH,
                TARGET_EXPONENT + EXPONENT_HALF_WIDTH,
                format!("η* ∝ L^p over L = {depths:?}, r² {:.4}", fit.r_squared),
            )
            .with_replicates(plan.replicates),
        );
    }
    Ok(report)
}
