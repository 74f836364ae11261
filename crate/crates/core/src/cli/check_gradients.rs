use clap::Args;

use super::report::{Check, Report};
use super::CommonArgs;
use crate::error::{Error, Result};
use crate::net::{loss_gradient, ForwardTrace, NetworkState};
use crate::oracle::{gradient_suite_with, oracle_suite, SuiteConfig, SuiteReport};

#[derive(Debug, Clone, Args)]
pub struct CheckGradientsArgs {
    /// `--width` and `--depth` cap the random widths and depths of the finite-difference nets.
    #[command(flatten)]
    pub common: CommonArgs,
    /// Nets in the finite-difference suite.
    #[arg(long, default_value_t = 100)]
    pub nets: usize,
    /// Nets in the naive-enumeration suite.
    #[arg(long, default_value_t = 50)]
    pub oracle_nets: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 1e-10)]
    pub oracle_tolerance: f64,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-6)]
    pub step: f64,
    /// Test fixture: negate the first-layer gradient before checking it.
    #[arg(long, hide = true)]
    pub inject_sign_flip: bool,
}

fn sign_flipped(s: &NetworkState, t: &ForwardTrace, y: &[f64]) -> Result<crate::net::ParameterGradients> {
    let mut g = loss_gradient(s, t, y)?;
    g.grads[0].scale(-1.0);
    Ok(g)
}

fn push_suite(report: &mut Report, suite: SuiteReport) {
    for c in &suite.checks {
        report.checks.push(Check::band(
            format!("{}/{}", suite.suite, c.name),
            c.max_rel_error,
            0.0,
            c.tolerance,
            format!(
                "worst net {} (seed {}), {} comparisons",
                c.worst_net, c.worst_seed, c.comparisons
            ),
        ));
    }
    report.suites.push(suite);
}

pub fn run(args: &CheckGradientsArgs) -> Result<Report> {
    if args.nets == 0 || args.oracle_nets == 0 {
        return Err(Error::Config("suites need at least one net".into()));
    }
    if !(args.step > 0.0 && args.tolerance > 0.0 && args.oracle_tolerance > 0.0) {
        return Err(Error::Config("step and tolerances must be positive".into()));
    }
    let mut fd = SuiteConfig::finite_difference(args.common.seed);
    fd.nets = args.nets;
    fd.tolerance = args.tolerance;
    fd.step = args.step;
    if let Some(w) = args.common.width {
        fd.max_width = w;
    }
    if let Some(d) = args.common.depth {
        fd.max_depth = d;
    }
    if fd.max_width == 0 || fd.max_depth == 0 {
        return Err(Error::Config("--width and --depth must be positive".into()));
    }
    let mut oracle = SuiteConfig::oracle(args.common.seed);
    oracle.nets = args.oracle_nets;
    oracle.tolerance = args.oracle_tolerance;

    let mut report = Report::new("check-gradients");
    let grad_fn = if args.inject_sign_flip {
        &sign_flipped as &crate::oracle::GradientFn<'_>
    } else {
        &loss_gradient as &crate::oracle::GradientFn<'_>
    };
    push_suite(&mut report, gradient_suite_with(&fd, grad_fn)?);
    push_suite(&mut report, oracle_suite(&oracle)?);
    Ok(report)
}
