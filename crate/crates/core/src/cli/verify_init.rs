use std::path::PathBuf;

use clap::Args;

use super::report::{Check, Report};
use super::{read_x_file, CommonArgs};
use crate::error::Result;
use crate::harness::{run_sweep, ExperimentPlan, LayerSelection, RateSpec};
use crate::observables::Observable;

#[derive(Debug, Clone, Args)]
pub struct VerifyInitArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Fixed input for every replicate (JSON array or whitespace separated); length n0.
    #[arg(long, value_name = "PATH")]
    pub x_file: Option<PathBuf>,
}

const DEFAULT_WIDTH: usize = 512;
const DEFAULT_DEPTH: usize = 10;
const DEFAULT_REPLICATES: usize = 2000;
/// Relative band on `E‖z‖²/‖x‖²`, applied together with the 3-stderr band.
const REL_TOL: f64 = 0.05;

/// Checks `E‖z^(ℓ)‖² = ‖x‖²` at every measured layer, the Gaussian fourth
/// moment `3·gain²` at layer 1, and that the fourth moment at the deepest
/// measured layer stays within a factor 10 of layer 1.
pub fn run(args: &VerifyInitArgs) -> Result<Report> {
    let c = &args.common;
    let cfg = c.network(DEFAULT_WIDTH, DEFAULT_DEPTH)?;
    let gain = cfg.init_variant.first_layer_gain();
    let mut plan = ExperimentPlan::new(
        cfg.clone(),
        RateSpec::Global(1.0),
        vec![Observable::SecondMomentRatio, Observable::FourthMomentRatio],
        c.replicates_or(DEFAULT_REPLICATES),
    );
    plan.layers = c.layers.clone().map_or(LayerSelection::All, LayerSelection::List);
    plan.workers = c.workers;
    if let Some(p) = &args.x_file {
        plan.fixed_input = Some(read_x_file(p, cfg.input_dim())?);
    }
    let out = run_sweep(&plan)?;
    let point = &out.points[0];

    let mut report = Report::new("verify-init");
    report.rows = out.rows.clone();
    report.warnings = out.warnings.clone();
    let layers = plan.layers.resolve(cfg.depth());
    for &l in &layers {
        let e = point.estimate(Observable::SecondMomentRatio, l).expect("measured");
        let half = (3.0 * e.stderr).min(REL_TOL);
        report.checks.push(
            Check::band(
                format!("second_moment_identity/layer{l}"),
                e.mean,
                1.0 - half,
                1.0 + half,
                format!(
                    "E‖z‖²/‖x‖² = {:.5} ± {:.5}, {:.2} stderr and {:.2}% from 1",
                    e.mean,
                    e.stderr,
                    (e.mean - 1.0) / e.stderr,
                    100.0 * (e.mean - 1.0)
                ),
            )
            .with_replicates(e.replicates),
        );
    }
    if let Some(e) = point.estimate(Observable::FourthMomentRatio, 1) {
        let expected = 3.0 * gain * gain;
        let half = (3.0 * e.stderr).min(REL_TOL * expected);
        report.checks.push(
            Check::band(
                "fourth_moment_gaussian/layer1",
                e.mean,
                expected - half,
                expected + half,
                format!("{:.4} ± {:.4} against 3·gain² = {expected}", e.mean, e.stderr),
            )
            .with_replicates(e.replicates),
        );
    }
    if let (Some(&first), Some(&last)) = (layers.first(), layers.last()) {
        if last > first {
            let a = point.estimate(Observable::FourthMomentRatio, first).expect("measured");
            let b = point.estimate(Observable::FourthMomentRatio, last).expect("measured");
            report.checks.push(
                Check::band(
                    format!("fourth_moment_growth/layer{last}_over_layer{first}"),
                    b.mean / a.mean,
                    0.1,
                    10.0,
                    "fourth moment neither explodes nor vanishes with depth",
                )
                .with_replicates(a.replicates),
            );
        }
    }
    Ok(report)
}
