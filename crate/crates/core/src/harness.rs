//! Replicated Monte Carlo over independent (weights, batch) draws.
//!
//! Replicate `r` of sweep point `a` draws its weights from stream
//! `(seed, Weights, r, a)` and its datapoint from `(seed, Batch, r, a)`, so a
//! replicate's samples depend only on the plan and `r`. Replicates run on a
//! rayon pool; their sample rows are collected in index order and reduced
//! sequentially, which makes the output independent of the worker count.
//! Rate sweeps reuse the draws of point 0 at every rate.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{init_network, LearningRateSchedule, NetworkConfig, NetworkState};
use crate::observables::{
    evaluate, sample_batch_with_target_scale, Batch, CoordinateReduction, EvalSettings, Observable,
    ObservableEstimate,
};
use crate::rng::{Purpose, StreamKey};
use crate::stats::RunningMoments;

/// Learning rates, either one global rate or an explicit per-layer list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RateSpec {
    Global(f64),
    PerLayer(Vec<f64>),
}

impl RateSpec {
    pub fn schedule(&self, depth: usize) -> Result<LearningRateSchedule> {
        match self {
            RateSpec::Global(eta) => LearningRateSchedule::global(*eta, depth),
            RateSpec::PerLayer(v) => LearningRateSchedule::new(v.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerSelection {
    All,
    Last,
    /// Explicit layers; entries deeper than the network are dropped.
    List(Vec<usize>),
}

impl LayerSelection {
    pub fn resolve(&self, depth: usize) -> Vec<usize> {
        match self {
            LayerSelection::All => (1..=depth).collect(),
            LayerSelection::Last => vec![depth],
            LayerSelection::List(v) => v.iter().copied().filter(|&l| l >= 1 && l <= depth).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SweepAxis {
    None,
    Depth(Vec<usize>),
    /// Hidden width; the input width follows it when the base network is uniform.
    Width(Vec<usize>),
    /// Global rate.
    Rate(Vec<f64>),
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::None => "none",
            SweepAxis::Depth(_) => "depth",
            SweepAxis::Width(_) => "width",
            SweepAxis::Rate(_) => "eta",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            SweepAxis::None => 1,
            SweepAxis::Depth(v) | SweepAxis::Width(v) => v.len(),
            SweepAxis::Rate(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub config: NetworkConfig,
    pub rates: RateSpec,
    pub observables: Vec<Observable>,
    pub layers: LayerSelection,
    pub replicates: usize,
    pub coords: CoordinateReduction,
    /// `E‖y‖²` of the sampled targets.
    pub target_second_moment: f64,
    /// Use this input for every replicate instead of sampling one.
    pub fixed_input: Option<Vec<f64>>,
    pub sweep: SweepAxis,
    /// Rayon pool size; 0 lets rayon choose.
    pub workers: usize,
    /// Warn when `L / min hidden width` exceeds this.
    pub c1_bound: f64,
}

impl ExperimentPlan {
    pub fn new(config: NetworkConfig, rates: RateSpec, observables: Vec<Observable>, replicates: usize) -> Self {
        ExperimentPlan {
            config,
            rates,
            observables,
            layers: LayerSelection::All,
            replicates,
            coords: CoordinateReduction::First,
            target_second_moment: 1.0,
            fixed_input: None,
            sweep: SweepAxis::None,
            workers: 0,
            c1_bound: 0.25,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates < 2 {
            return Err(Error::Config(format!("need at least 2 replicates, got {}", self.replicates)));
        }
        if self.observables.is_empty() {
            return Err(Error::Config("no observables requested".into()));
        }
        if !(self.target_second_moment >= 0.0 && self.target_second_moment.is_finite()) {
            return Err(Error::Config("target second moment must be finite and non-negative".into()));
        }
        if let Some(x) = &self.fixed_input {
            crate::error::check_len("fixed input length", self.config.input_dim(), x.len())?;
        }
        if let (SweepAxis::Depth(_), RateSpec::PerLayer(_)) = (&self.sweep, &self.rates) {
            return Err(Error::Config("a depth sweep needs a global rate".into()));
        }
        if self.sweep.is_empty() {
            return Err(Error::Config("sweep axis has no values".into()));
        }
        Ok(())
    }

    /// The concrete network and schedule at sweep point `index`.
    pub fn point(&self, index: usize) -> Result<(NetworkConfig, LearningRateSchedule, f64)> {
        let base = &self.config;
        let n_out = base.output_dim();
        let rebuild = |widths: Vec<usize>| {
            NetworkConfig::new(widths, base.init_variant, base.master_seed)
        };
        match &self.sweep {
            SweepAxis::None => Ok((base.clone(), self.rates.schedule(base.depth())?, f64::NAN)),
            SweepAxis::Depth(v) => {
                let depth = v[index];
                let mut widths = vec![base.input_dim()];
                widths.extend(std::iter::repeat(base.width(1)).take(depth));
                widths.push(n_out);
                let cfg = rebuild(widths)?;
                let sched = self.rates.schedule(depth)?;
                Ok((cfg, sched, depth as f64))
            }
            SweepAxis::Width(v) => {
                let n = v[index];
                let n0 = if base.input_dim() == base.width(1) { n } else { base.input_dim() };
                let mut widths = vec![n0];
                widths.extend(std::iter::repeat(n).take(base.depth()));
                widths.push(n_out);
                Ok((rebuild(widths)?, self.rates.schedule(base.depth())?, n as f64))
            }
            SweepAxis::Rate(v) => {
                let eta = v[index];
                let sched = match &self.rates {
                    RateSpec::Global(_) => LearningRateSchedule::global(eta, base.depth())?,
                    RateSpec::PerLayer(p) => {
                        let max = p.iter().cloned().fold(0.0, f64::max);
                        if max == 0.0 {
                            return Err(Error::Config("rate sweep over an all-zero schedule".into()));
                        }
                        LearningRateSchedule::new(p.iter().map(|r| r / max * eta).collect())?
                    }
                };
                Ok((base.clone(), sched, eta))
            }
        }
    }
}

/// Per-replicate evaluator: returns one value per `(observable, layer)` cell.
pub trait Evaluator: Sync {
    fn evaluate(
        &self,
        state: &NetworkState,
        batch: &Batch,
        schedule: &LearningRateSchedule,
        cells: &[(Observable, usize)],
    ) -> Result<Vec<f64>>;
}

impl<F> Evaluator for F
where
    F: Fn(&NetworkState, &Batch, &LearningRateSchedule, &[(Observable, usize)]) -> Result<Vec<f64>> + Sync,
{
    fn evaluate(
        &self,
        state: &NetworkState,
        batch: &Batch,
        schedule: &LearningRateSchedule,
        cells: &[(Observable, usize)],
    ) -> Result<Vec<f64>> {
        self(state, batch, schedule, cells)
    }
}

struct DefaultEvaluator(EvalSettings);

impl Evaluator for DefaultEvaluator {
    fn evaluate(
        &self,
        state: &NetworkState,
        batch: &Batch,
        schedule: &LearningRateSchedule,
        cells: &[(Observable, usize)],
    ) -> Result<Vec<f64>> {
        evaluate(state, batch, schedule, cells, self.0)
    }
}

/// Samples and estimates of one replicated run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunOutput {
    pub cells: Vec<(Observable, usize)>,
    /// `samples[r][c]`: replicate `r`, cell `c`.
    #[serde(skip)]
    pub samples: Vec<Vec<f64>>,
    pub estimates: Vec<ObservableEstimate>,
    pub warnings: Vec<String>,
}

impl RunOutput {
    pub fn estimate(&self, observable: Observable, layer: usize) -> Option<&ObservableEstimate> {
        self.estimates
            .iter()
            .find(|e| e.observable == observable && e.layer == layer)
    }

    fn index(&self, observable: Observable, layer: usize) -> Option<usize> {
        self.cells.iter().position(|&c| c == (observable, layer))
    }

    /// Moments of a per-replicate combination of cells.
    pub fn combine<F>(&self, inputs: &[(Observable, usize)], f: F) -> Option<RunningMoments>
    where
        F: Fn(&[f64]) -> f64,
    {
        let idx: Vec<usize> = inputs
            .iter()
            .map(|&(o, l)| self.index(o, l))
            .collect::<Option<_>>()?;
        let mut buf = vec![0.0; idx.len()];
        let mut m = RunningMoments::new();
        for row in &self.samples {
            for (b, &i) in buf.iter_mut().zip(&idx) {
                *b = row[i];
            }
            m.push(f(&buf));
        }
        Some(m)
    }
}

fn build_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Pool(e.to_string()))
}

fn depth_warning(cfg: &NetworkConfig, c1: f64) -> Option<String> {
    let ratio = cfg.depth() as f64 / cfg.min_hidden() as f64;
    (ratio > c1).then(|| {
        format!(
            "depth/width ratio {ratio:.3} (L = {}, min width {}) exceeds the bound {c1}",
            cfg.depth(),
            cfg.min_hidden()
        )
    })
}

/// Runs the plan at sweep point 0 (or the plain config when not sweeping).
pub fn run_replicated(plan: &ExperimentPlan) -> Result<RunOutput> {
    let settings = EvalSettings {
        coords: plan.coords,
        target_second_moment: plan.target_second_moment,
    };
    run_replicated_with(plan, &DefaultEvaluator(settings))
}

pub fn run_replicated_with(plan: &ExperimentPlan, evaluator: &dyn Evaluator) -> Result<RunOutput> {
    plan.validate()?;
    let pool = build_pool(plan.workers)?;
    run_point(plan, 0, evaluator, &pool)
}

fn run_point(
    plan: &ExperimentPlan,
    axis_index: usize,
    evaluator: &dyn Evaluator,
    pool: &rayon::ThreadPool,
) -> Result<RunOutput> {
    let (cfg, schedule, _) = plan.point(axis_index)?;
    let layers = plan.layers.resolve(cfg.depth());
    if layers.is_empty() {
        return Err(Error::Config(format!("no requested layer lies within depth {}", cfg.depth())));
    }
    let cells: Vec<(Observable, usize)> = plan
        .observables
        .iter()
        .flat_map(|&o| layers.iter().map(move |&l| (o, l)))
        .filter(|&(o, l)| o.applies_at(l))
        .collect();
    if cells.is_empty() {
        return Err(Error::Config("no requested observable applies at the requested layers".into()));
    }
    let seed = cfg.master_seed;
    // Rate points share their draws so they differ only through the schedule.
    let axis = match plan.sweep {
        SweepAxis::Rate(_) => 0,
        _ => axis_index as u64,
    };

    let rows: Vec<Result<Vec<f64>>> = pool.install(|| {
        (0..plan.replicates)
            .into_par_iter()
            .map(|r| {
                let state = init_network(&cfg, &mut StreamKey::new(seed, Purpose::Weights, r as u64, axis).stream())?;
                let mut batch_stream = StreamKey::new(seed, Purpose::Batch, r as u64, axis).stream();
                let mut batch = sample_batch_with_target_scale(
                    cfg.input_dim(),
                    cfg.output_dim(),
                    plan.target_second_moment,
                    &mut batch_stream,
                );
                if let Some(x) = &plan.fixed_input {
                    batch.x = x.clone();
                }
                evaluator.evaluate(&state, &batch, &schedule, &cells)
            })
            .collect()
    });

    let mut moments = vec![RunningMoments::new(); cells.len()];
    let mut samples = Vec::with_capacity(plan.replicates);
    for (r, row) in rows.into_iter().enumerate() {
        let row = row.map_err(|e| Error::Replicate {
            index: r,
            source: Box::new(e),
        })?;
        if row.len() != cells.len() {
            return Err(Error::Dimension {
                what: "evaluator output",
                expected: cells.len(),
                got: row.len(),
            });
        }
        for (m, &v) in moments.iter_mut().zip(&row) {
            m.push(v);
        }
        samples.push(row);
    }
    let estimates = cells
        .iter()
        .zip(&moments)
        .map(|(&(observable, layer), m)| ObservableEstimate {
            observable,
            layer,
            mean: m.mean,
            stderr: m.stderr(),
            replicates: m.count as usize,
        })
        .collect();
    Ok(RunOutput {
        cells,
        samples,
        estimates,
        warnings: depth_warning(&cfg, plan.c1_bound).into_iter().collect(),
    })
}

/// One `(axis value, observable, layer)` row of a sweep table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis_name: String,
    pub axis_value: f64,
    pub observable: String,
    pub layer: usize,
    pub mean: f64,
    pub stderr: f64,
    pub replicates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepOutput {
    pub rows: Vec<SweepRow>,
    /// One run per axis point, samples included.
    #[serde(skip)]
    pub points: Vec<RunOutput>,
    pub warnings: Vec<String>,
}

pub fn run_sweep(plan: &ExperimentPlan) -> Result<SweepOutput> {
    let settings = EvalSettings {
        coords: plan.coords,
        target_second_moment: plan.target_second_moment,
    };
    run_sweep_with(plan, &DefaultEvaluator(settings))
}

pub fn run_sweep_with(plan: &ExperimentPlan, evaluator: &dyn Evaluator) -> Result<SweepOutput> {
    plan.validate()?;
    let pool = build_pool(plan.workers)?;
    let mut rows = Vec::new();
    let mut points = Vec::new();
    let mut warnings = Vec::new();
    for a in 0..plan.sweep.len() {
        let (_, _, value) = plan.point(a)?;
        let out = run_point(plan, a, evaluator, &pool)?;
        for e in &out.estimates {
            rows.push(SweepRow {
                axis_name: plan.sweep.name().to_string(),
                axis_value: value,
                observable: e.observable.to_string(),
                layer: e.layer,
                mean: e.mean,
                stderr: e.stderr,
                replicates: e.replicates,
            });
        }
        warnings.extend(out.warnings.iter().cloned());
        points.push(out);
    }
    Ok(SweepOutput { rows, points, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::UpdateMode;

    fn plan(n: usize, depth: usize, reps: usize) -> ExperimentPlan {
        ExperimentPlan::new(
            NetworkConfig::uniform(n, depth, 1).unwrap().with_seed(9),
            RateSpec::Global(0.1),
            vec![Observable::SecondMoment, Observable::DeltaZSq(UpdateMode::Linearized)],
            reps,
        )
    }

    #[test]
    fn constant_stub_gives_mean_one_and_zero_stderr() {
        let stub = |_: &NetworkState, _: &Batch, _: &LearningRateSchedule, cells: &[(Observable, usize)]| {
            Ok(vec![1.0; cells.len()])
        };
        let out = run_replicated_with(&plan(4, 2, 2), &stub).unwrap();
        for e in &out.estimates {
            assert_eq!((e.mean, e.stderr, e.replicates), (1.0, 0.0, 2));
        }
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let mut p = plan(8, 3, 40);
        p.workers = 1;
        let a = run_replicated(&p).unwrap();
        p.workers = 5;
        let b = run_replicated(&p).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn replicate_errors_carry_their_index() {
        let stub = |_: &NetworkState, b: &Batch, _: &LearningRateSchedule, _: &[(Observable, usize)]| {
            if b.x[0] > 0.0 {
                Err(Error::NonFinite("stub"))
            } else {
                Ok(vec![0.0; 2 * 3])
            }
        };
        match run_replicated_with(&plan(4, 3, 50), &stub) {
            Err(Error::Replicate { index, .. }) => assert!(index < 50),
            other => panic!("expected replicate error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_single_replicate_and_empty_layers() {
        assert!(run_replicated(&plan(4, 2, 1)).is_err());
        let mut p = plan(4, 2, 3);
        p.layers = LayerSelection::List(vec![7]);
        assert!(run_replicated(&p).is_err());
    }

    #[test]
    fn depth_sweep_has_matching_row_groups() {
        let mut p = plan(6, 2, 3);
        p.sweep = SweepAxis::Depth(vec![4, 8]);
        p.layers = LayerSelection::Last;
        let out = run_sweep(&p).unwrap();
        assert_eq!(out.rows.len(), 4);
        assert_eq!(out.rows[0].axis_value, 4.0);
        assert_eq!(out.rows[0].layer, 4);
        assert_eq!(out.rows[2].layer, 8);
        assert_eq!(out.rows[0].observable, out.rows[2].observable);
        assert!(!out.warnings.is_empty());
    }

    #[test]
    fn rate_sweep_scales_linearized_delta_exactly() {
        let mut p = plan(6, 3, 5);
        p.observables = vec![Observable::DeltaZSq(UpdateMode::Linearized)];
        p.layers = LayerSelection::Last;
        p.sweep = SweepAxis::Rate(vec![1.0, 0.5, 0.25]);
        let out = run_sweep(&p).unwrap();
        let base = &out.points[0].samples;
        for (k, eta) in [(1, 0.5), (2, 0.25)] {
            for (a, b) in out.points[k].samples.iter().zip(base) {
                assert_eq!(a[0], eta * eta * b[0]);
            }
        }
    }

    #[test]
    fn combine_sums_cells_per_replicate() {
        let out = run_replicated(&plan(5, 2, 6)).unwrap();
        let cells = [(Observable::SecondMoment, 1), (Observable::SecondMoment, 2)];
        let m = out.combine(&cells, |v| v[0] + v[1]).unwrap();
        let sum = out.estimate(Observable::SecondMoment, 1).unwrap().mean
            + out.estimate(Observable::SecondMoment, 2).unwrap().mean;
        assert!((m.mean - sum).abs() < 1e-12 * sum);
    }
}
