//! Slow reference implementations used to validate the fast paths.
//!
//! Two families live here. The naive observables enumerate every weight
//! `W^(m)_{ab}` individually and form the sums over parameters literally, with
//! no Jacobian or Gram identities. The finite-difference checks perturb one
//! weight (or one pre-activation) at a time and compare central differences
//! against the analytic derivatives. Both are only meant for tiny networks.

use rand::Rng;
use serde::Serialize;
use twofloat::TwoFloat;

use crate::error::Result;
use crate::linalg::{dot, norm_sq, Matrix};
use crate::net::{
    delta_z_linearized, forward, init_network, interlayer_jacobian, loss_gradient, preactivation_param_gradient,
    ForwardTrace, InitVariant, LearningRateSchedule, NetworkConfig, NetworkState, ParameterCoordinate,
    ParameterGradients,
};
use crate::observables::{cond_projection_residual, gram_sums, CrossStack, KernelStack};
use crate::rng::{gaussian_vec, mix64, Purpose, StreamKey};

/// `(μ, ∂z^(ℓ)/∂μ)` for every weight in layers `1..=ℓ`.
pub fn enumerate_param_gradients(
    state: &NetworkState,
    trace: &ForwardTrace,
    layer: usize,
) -> Result<Vec<(ParameterCoordinate, Vec<f64>)>> {
    ParameterCoordinate::all(state, layer)
        .into_iter()
        .map(|mu| Ok((mu, preactivation_param_gradient(state, trace, mu, layer)?)))
        .collect()
}

/// `Σ_{μ ∈ layer m} ∂_μ z^(ℓ) (∂_μ z^(ℓ))ᵀ` by direct enumeration.
pub fn naive_gram_sums(state: &NetworkState, trace: &ForwardTrace, m: usize, layer: usize) -> Result<Matrix> {
    let n = state.width(layer);
    let mut out = Matrix::zeros(n, n);
    for (mu, g) in enumerate_param_gradients(state, trace, layer)? {
        if mu.layer != m {
            continue;
        }
        for i in 0..n {
            for j in 0..n {
                out.set(i, j, out.get(i, j) + g[i] * g[j]);
            }
        }
    }
    Ok(out)
}

/// Every Gram/cross-vector observable at one layer, by per-parameter sums.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NaiveObservables {
    pub b_gram: f64,
    pub btilde: f64,
    pub c: f64,
    pub ctilde: f64,
    pub b_pre: f64,
    pub a: f64,
}

pub fn naive_observables(
    state: &NetworkState,
    trace: &ForwardTrace,
    schedule: &LearningRateSchedule,
    layer: usize,
) -> Result<NaiveObservables> {
    let top = state.num_layers();
    let grads = enumerate_param_gradients(state, trace, layer)?;
    let readout: Vec<f64> = grads
        .iter()
        .map(|(mu, _)| Ok(preactivation_param_gradient(state, trace, *mu, top)?[0]))
        .collect::<Result<_>>()?;
    let eta: Vec<f64> = grads.iter().map(|(mu, _)| schedule.rate(mu.layer)).collect();

    let n_l = state.width(layer) as f64;
    let n_last = state.width(state.depth()) as f64;
    let norm = n_last * n_l * n_l;
    let z = trace.preact(layer);

    let mut b_gram = 0.0;
    let mut btilde = 0.0;
    for (p, (_, g1)) in grads.iter().enumerate() {
        for (q, (_, g2)) in grads.iter().enumerate() {
            let d = dot(g1, g2);
            b_gram += eta[p] * eta[q] * d * d;
            btilde += eta[p] * eta[q] * norm_sq(g1) * norm_sq(g2);
        }
    }
    let mut c = 0.0;
    let mut ctilde = 0.0;
    let mut cross = 0.0;
    for (p, (_, g)) in grads.iter().enumerate() {
        c += eta[p] * norm_sq(g);
        let gz = dot(g, z);
        ctilde += eta[p] * gz * gz;
        cross += eta[p] * g[0] * readout[p];
    }
    let out = trace.output()[0];
    Ok(NaiveObservables {
        b_gram: b_gram / norm,
        btilde: btilde / (norm * state.width(layer + 1) as f64),
        c: norm_sq(z) * c / norm,
        ctilde: ctilde / norm,
        b_pre: cross * cross,
        a: cross * cross * out * out,
    })
}

/// Linearized `Δz^(ℓ)` as `Σ_μ η_μ ∂_μ z^(ℓ) Σ_k (y_k − z_k^(L+1)) ∂_μ z_k^(L+1)`.
pub fn naive_delta_z_linearized(
    state: &NetworkState,
    trace: &ForwardTrace,
    y: &[f64],
    schedule: &LearningRateSchedule,
    layer: usize,
) -> Result<Vec<f64>> {
    let top = state.num_layers();
    let residual: Vec<f64> = y.iter().zip(trace.output()).map(|(t, z)| t - z).collect();
    let mut out = vec![0.0; state.width(layer)];
    for (mu, g) in enumerate_param_gradients(state, trace, layer)? {
        let h = preactivation_param_gradient(state, trace, mu, top)?;
        let weight = schedule.rate(mu.layer) * dot(&residual, &h);
        for (o, gi) in out.iter_mut().zip(&g) {
            *o += weight * gi;
        }
    }
    Ok(out)
}

/// The conditional-projection residual by enumeration over `μ1 ∈ m1, μ2 ∈ m2`.
///
/// Returns the value together with the sum of the magnitudes of its two terms,
/// which is the natural scale for comparing a signed difference.
pub fn naive_cond_projection_residual(
    state: &NetworkState,
    trace: &ForwardTrace,
    m1: usize,
    m2: usize,
    layer: usize,
) -> Result<(f64, f64)> {
    let depth = state.depth();
    let at_l = enumerate_param_gradients(state, trace, layer)?;
    let at_top = enumerate_param_gradients(state, trace, depth)?;
    let n_l = state.width(layer) as f64;
    let n_last = state.width(depth) as f64;
    let mut upper = 0.0;
    let mut lower = 0.0;
    for (p, (mu1, g1)) in at_l.iter().enumerate() {
        if mu1.layer != m1 {
            continue;
        }
        for (q, (mu2, g2)) in at_l.iter().enumerate() {
            if mu2.layer != m2 {
                continue;
            }
            let w = g1[0] * g2[0];
            upper += w * dot(&at_top[p].1, &at_top[q].1);
            lower += w * dot(g1, g2);
        }
    }
    let upper = upper / n_last;
    let lower = lower / n_l;
    Ok((upper - lower, upper.abs() + lower.abs()))
}

/// `|a − b| / max(|a|, |b|, floor)`, zero when both vanish.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    let d = (a - b).abs();
    if d == 0.0 {
        return 0.0;
    }
    d / a.abs().max(b.abs()).max(floor)
}

/// Settings shared by the tiny-network suites.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SuiteConfig {
    pub nets: usize,
    pub max_width: usize,
    pub max_depth: usize,
    pub max_outputs: usize,
    pub seed: u64,
    /// Finite-difference step.
    pub step: f64,
    /// Draws with any hidden `|z_j| <` this are rejected to stay off ReLU kinks.
    pub kink_margin: f64,
    /// Relative errors are measured against `max(|a|, |b|, floor · max_j |a_j|)`.
    pub relative_floor: f64,
    pub tolerance: f64,
}

impl SuiteConfig {
    /// 100 nets, widths ≤ 6, depth ≤ 4, step 1e-6, tolerance 1e-6.
    pub fn finite_difference(seed: u64) -> Self {
        SuiteConfig {
            nets: 100,
            max_width: 6,
            max_depth: 4,
            max_outputs: 3,
            seed,
            step: 1e-6,
            kink_margin: 1e-4,
            relative_floor: 0.0,
            tolerance: 1e-6,
        }
    }

    /// 50 nets, widths ≤ 5, depth ≤ 3, tolerance 1e-10.
    pub fn oracle(seed: u64) -> Self {
        SuiteConfig {
            nets: 50,
            max_width: 5,
            max_depth: 3,
            max_outputs: 1,
            seed,
            step: 0.0,
            kink_margin: 0.0,
            relative_floor: 0.0,
            tolerance: 1e-10,
        }
    }
}

/// Worst case of one named check across all nets of a suite.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckSummary {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    /// Index of the net attaining the maximum.
    pub worst_net: usize,
    /// Seed that regenerates that net with [`tiny_draw`].
    pub worst_seed: u64,
    pub comparisons: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub nets: usize,
    pub checks: Vec<CheckSummary>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }
}

struct Tracker {
    checks: Vec<CheckSummary>,
}

impl Tracker {
    fn new(names: &[&str], tolerance: f64) -> Self {
        Tracker {
            checks: names
                .iter()
                .map(|n| CheckSummary {
                    name: n.to_string(),
                    max_rel_error: 0.0,
                    tolerance,
                    worst_net: 0,
                    worst_seed: 0,
                    comparisons: 0,
                    passed: true,
                })
                .collect(),
        }
    }

    fn record(&mut self, check: usize, err: f64, net: usize, seed: u64) {
        let c = &mut self.checks[check];
        c.comparisons += 1;
        if !(err <= c.max_rel_error) {
            c.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
            c.worst_net = net;
            c.worst_seed = seed;
        }
    }

    fn finish(mut self, suite: &str, nets: usize) -> SuiteReport {
        for c in &mut self.checks {
            c.passed = c.max_rel_error <= c.tolerance;
        }
        SuiteReport {
            suite: suite.to_string(),
            nets,
            checks: self.checks,
        }
    }
}

/// A random tiny network with its datapoint.
#[derive(Debug, Clone)]
pub struct TinyDraw {
    pub state: NetworkState,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub schedule: LearningRateSchedule,
}

/// Draws a network with random widths in `1..=max_width`, depth in `1..=max_depth`,
/// a Gaussian datapoint and a random per-layer schedule in `[0.1, 1.1)`.
///
/// Redraws (from the same seed, deterministically) until every hidden
/// pre-activation is at least `kink_margin` away from zero.
pub fn tiny_draw(seed: u64, max_width: usize, max_depth: usize, max_outputs: usize, kink_margin: f64) -> TinyDraw {
    let mut rng = StreamKey::new(seed, Purpose::Probe, 0, 0).stream();
    loop {
        let depth = rng.gen_range(1..=max_depth);
        let mut widths: Vec<usize> = (0..=depth).map(|_| rng.gen_range(1..=max_width)).collect();
        widths.push(rng.gen_range(1..=max_outputs.min(max_width).max(1)));
        let cfg = NetworkConfig::new(widths.clone(), InitVariant::MeanFieldExactHe, seed)
            .expect("generated widths are valid");
        let state = init_network(&cfg, &mut rng).expect("valid config");
        let x = gaussian_vec(&mut rng, widths[0], 1.0);
        let y = gaussian_vec(&mut rng, widths[depth + 1], 1.0);
        let schedule = LearningRateSchedule::new((0..=depth).map(|_| 0.1 + rng.gen::<f64>()).collect())
            .expect("positive rates");
        let trace = forward(&state, &x).expect("consistent shapes");
        let clear = (1..=depth).all(|l| trace.preact(l).iter().all(|z| z.abs() >= kink_margin));
        if clear {
            return TinyDraw { state, x, y, schedule };
        }
    }
}

fn net_seed(master: u64, index: usize) -> u64 {
    mix64(master ^ mix64(index as u64 + 1))
}

/// Forward pass in double-double arithmetic, optionally overriding one weight
/// or one pre-activation. Returns `z^(1..=L+1)`.
fn forward_dd(
    state: &NetworkState,
    x: &[f64],
    weight: Option<(ParameterCoordinate, TwoFloat)>,
    preact: Option<(usize, Vec<TwoFloat>)>,
) -> Vec<Vec<TwoFloat>> {
    let mut a: Vec<TwoFloat> = x.iter().map(|&v| TwoFloat::from(v)).collect();
    let mut out = Vec::with_capacity(state.num_layers());
    let start = preact.as_ref().map_or(1, |(m, _)| m + 1);
    if let Some((m, z)) = preact {
        out.resize(m - 1, Vec::new());
        a = z.iter().map(|&v| if v > 0.0 { v } else { TwoFloat::from(0.0) }).collect();
        out.push(z);
    }
    for k in start..=state.num_layers() {
        let w = state.weight(k);
        let z: Vec<TwoFloat> = (0..w.rows())
            .map(|i| {
                let mut acc = TwoFloat::from(0.0);
                for (j, aj) in a.iter().enumerate() {
                    let wij = match weight {
                        Some((mu, v)) if mu.layer == k && mu.row == i && mu.col == j => v,
                        _ => TwoFloat::from(w.get(i, j)),
                    };
                    acc += wij * *aj;
                }
                acc
            })
            .collect();
        a = z.iter().map(|&v| if v > 0.0 { v } else { TwoFloat::from(0.0) }).collect();
        out.push(z);
    }
    out
}

fn half_sq_loss_dd(z: &[TwoFloat], y: &[f64]) -> TwoFloat {
    let mut acc = TwoFloat::from(0.0);
    for (zk, &yk) in z.iter().zip(y) {
        let r = *zk - yk;
        acc += r * r;
    }
    acc * 0.5
}

/// Central difference `(f(w+h) − f(w−h)) / 2h` in one weight, evaluated in
/// double-double so the reference carries no f64 cancellation noise.
fn central_difference<F>(state: &NetworkState, mu: ParameterCoordinate, h: f64, f: F) -> Vec<f64>
where
    F: Fn(Option<(ParameterCoordinate, TwoFloat)>) -> Vec<TwoFloat>,
{
    let w = TwoFloat::from(state.weight(mu.layer).get(mu.row, mu.col));
    let fp = f(Some((mu, w + h)));
    let fm = f(Some((mu, w - h)));
    fp.iter().zip(&fm).map(|(p, m)| f64::from((*p - *m) / (2.0 * h))).collect()
}

/// Signature of a loss-gradient implementation under test.
pub type GradientFn<'a> = dyn Fn(&NetworkState, &ForwardTrace, &[f64]) -> Result<ParameterGradients> + Sync + 'a;

/// Finite-difference suite with the crate's own [`loss_gradient`].
pub fn gradient_suite(cfg: &SuiteConfig) -> Result<SuiteReport> {
    gradient_suite_with(cfg, &loss_gradient)
}

/// Finite-difference suite: loss gradient (via `grad_fn`), interlayer Jacobians
/// and pre-activation parameter gradients, on `cfg.nets` random tiny nets.
pub fn gradient_suite_with(cfg: &SuiteConfig, grad_fn: &GradientFn<'_>) -> Result<SuiteReport> {
    let names = ["loss_gradient", "interlayer_jacobian", "preactivation_param_gradient"];
    let mut tracker = Tracker::new(&names, cfg.tolerance);
    let h = cfg.step;
    for net in 0..cfg.nets {
        let seed = net_seed(cfg.seed, net);
        let d = tiny_draw(seed, cfg.max_width, cfg.max_depth, cfg.max_outputs, cfg.kink_margin);
        let state = &d.state;
        let trace = forward(state, &d.x)?;
        let top = state.num_layers();

        let analytic = grad_fn(state, &trace, &d.y)?;
        let scale = analytic.grads.iter().map(Matrix::max_abs).fold(0.0, f64::max);
        for mu in ParameterCoordinate::all(state, top) {
            let fd = central_difference(state, mu, h, |w| {
                vec![half_sq_loss_dd(forward_dd(state, &d.x, w, None).last().expect("output"), &d.y)]
            })[0];
            let a = analytic.layer(mu.layer).get(mu.row, mu.col);
            tracker.record(0, relative_error(a, fd, cfg.relative_floor * scale), net, seed);
        }

        for to in 1..=top {
            for from in 1..=to {
                let j = interlayer_jacobian(state, &trace, from, to)?;
                let jscale = j.matrix.max_abs();
                for a in 0..state.width(from) {
                    let col = jacobian_column_fd(state, &trace, from, to, a, h);
                    for (i, fd) in col.iter().enumerate() {
                        let e = relative_error(j.matrix.get(i, a), *fd, cfg.relative_floor * jscale);
                        tracker.record(1, e, net, seed);
                    }
                }
            }
        }

        for layer in 1..=top {
            let grads = enumerate_param_gradients(state, &trace, layer)?;
            let gscale = grads.iter().map(|(_, g)| g.iter().fold(0.0f64, |m, v| m.max(v.abs()))).fold(0.0, f64::max);
            for (mu, g) in grads {
                let fd = central_difference(state, mu, h, |w| forward_dd(state, &d.x, w, None).swap_remove(layer - 1));
                for (a, b) in g.iter().zip(&fd) {
                    tracker.record(2, relative_error(*a, *b, cfg.relative_floor * gscale), net, seed);
                }
            }
        }
    }
    Ok(tracker.finish("finite_difference", cfg.nets))
}

/// Column `a` of `∂z^(to)/∂z^(from)` by perturbing `z^(from)_a` and re-running
/// layers `from+1..=to`.
fn jacobian_column_fd(
    state: &NetworkState,
    trace: &ForwardTrace,
    from: usize,
    to: usize,
    a: usize,
    h: f64,
) -> Vec<f64> {
    let run = |delta: f64| {
        let mut z: Vec<TwoFloat> = trace.preact(from).iter().map(|&v| TwoFloat::from(v)).collect();
        z[a] += delta;
        forward_dd(state, &trace.input, None, Some((from, z))).swap_remove(to - 1)
    };
    let (zp, zm) = (run(h), run(-h));
    zp.iter().zip(&zm).map(|(p, m)| f64::from((*p - *m) / (2.0 * h))).collect()
}

/// Gram-path observables against naive enumeration on `cfg.nets` random tiny nets.
pub fn oracle_suite(cfg: &SuiteConfig) -> Result<SuiteReport> {
    let names = [
        "gram_sums",
        "b_gram",
        "btilde",
        "c",
        "ctilde",
        "b_pre",
        "a",
        "delta_z_linearized",
        "cond_proj_residual",
    ];
    let mut tracker = Tracker::new(&names, cfg.tolerance);
    for net in 0..cfg.nets {
        let seed = net_seed(cfg.seed, net);
        let d = tiny_draw(seed, cfg.max_width, cfg.max_depth, cfg.max_outputs, cfg.kink_margin);
        let state = &d.state;
        let sched = &d.schedule;
        let trace = forward(state, &d.x)?;
        let depth = state.depth();
        let kernels = KernelStack::new(state, &trace, sched, depth)?;
        let cross = CrossStack::new(state, &trace, sched, depth)?;
        for l in 1..=depth {
            for m in 1..=l {
                let fast = gram_sums(state, &trace, m, l)?;
                let slow = naive_gram_sums(state, &trace, m, l)?;
                for (a, b) in fast.as_slice().iter().zip(slow.as_slice()) {
                    tracker.record(0, relative_error(*a, *b, cfg.relative_floor), net, seed);
                }
            }
            let naive = naive_observables(state, &trace, sched, l)?;
            let pairs = [
                (kernels.b_gram(l), naive.b_gram),
                (kernels.btilde(l), naive.btilde),
                (kernels.c(l), naive.c),
                (kernels.ctilde(l), naive.ctilde),
                (cross.b_pre(l, Default::default()), naive.b_pre),
                (cross.a(l, Default::default()), naive.a),
            ];
            for (k, (a, b)) in pairs.iter().enumerate() {
                tracker.record(k + 1, relative_error(*a, *b, cfg.relative_floor), net, seed);
            }
            let fast = delta_z_linearized(state, &trace, &d.y, sched, l)?.values;
            let slow = naive_delta_z_linearized(state, &trace, &d.y, sched, l)?;
            for (a, b) in fast.iter().zip(&slow) {
                tracker.record(7, relative_error(*a, *b, cfg.relative_floor), net, seed);
            }
            for m1 in 1..=l {
                for m2 in 1..=l {
                    let fast = cond_projection_residual(state, &trace, m1, m2, l)?.value;
                    let (slow, magnitude) = naive_cond_projection_residual(state, &trace, m1, m2, l)?;
                    tracker.record(8, relative_error(fast, slow, magnitude), net, seed);
                }
            }
        }
    }
    Ok(tracker.finish("oracle_equivalence", cfg.nets))
}
