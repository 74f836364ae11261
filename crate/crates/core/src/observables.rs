//! Single-draw samples of the one-step update statistics.
//!
//! Everything that sums gradient products over parameters goes through two
//! closed forms instead of enumerating parameters:
//!
//! * the layer kernel `K^(ℓ) = Σ_{μ≤ℓ} η_μ ∂_μ z^(ℓ) (∂_μ z^(ℓ))ᵀ`, built by
//!   `K^(ℓ) = W^(ℓ) D^(ℓ-1) K^(ℓ-1) D^(ℓ-1) W^(ℓ)ᵀ + η_ℓ s_ℓ I` with
//!   `s_ℓ = ‖σ(z^(ℓ-1))‖²`; the per-layer pieces are the Gram sums
//!   `M^(m,ℓ) = s_m J^(m,ℓ) J^(m,ℓ)ᵀ`;
//! * the cross vector `v^(ℓ) = Σ_{μ≤ℓ} η_μ ∂_μ z^(ℓ) ∂_μ z_1^(L+1)`, built by
//!   the same forward transport applied to the readout sensitivities.
//!
//! The Gram-form quantities follow the layer-`ℓ` expressions obtained after
//! integrating out the weights above layer `ℓ`; the pre-integration forms keep
//! the readout weights and are the ones whose sum matches `E[(Δz)²]` exactly.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::linalg::{dot, gated_congruence, norm_sq, Matrix};
use crate::net::{
    backprop, delta_z_actual_all, forward, gate, interlayer_jacobian, rate_weighted_transport_all,
    ForwardTrace, LearningRateSchedule, NetworkState, UpdateMode,
};
use crate::rng::gaussian_vec;

/// One datapoint `(x, y)`, drawn independently of the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

/// `x ~ N(0, I_{n_0})` and `y ~ N(0, I_{n_out} / n_out)`, so that
/// `E‖x‖²/n_0 = 1` and `E‖y‖² = 1`.
pub fn sample_batch<R: Rng + ?Sized>(n0: usize, n_out: usize, stream: &mut R) -> Batch {
    sample_batch_with_target_scale(n0, n_out, 1.0, stream)
}

/// As [`sample_batch`] but with `E‖y‖² = target_second_moment`.
pub fn sample_batch_with_target_scale<R: Rng + ?Sized>(
    n0: usize,
    n_out: usize,
    target_second_moment: f64,
    stream: &mut R,
) -> Batch {
    let x = gaussian_vec(stream, n0, 1.0);
    let y = gaussian_vec(stream, n_out, (target_second_moment / n_out as f64).sqrt());
    Batch { x, y }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Quantity {
    A,
    B,
    Btilde,
    C,
    Ctilde,
    DeltaZSq,
    SecondMoment,
    FourthMoment,
    CondProjResidual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    Gram,
    Naive,
    PreIntegration,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObservableSample {
    pub which: Quantity,
    pub layer: usize,
    pub value: f64,
    pub variant: Variant,
}

/// How a per-neuron quantity at layer `ℓ` is reduced to one number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum CoordinateReduction {
    /// Neuron 1 only.
    #[default]
    First,
    /// Mean over all neurons of the layer. Same expectation by exchangeability.
    Mean,
}

impl CoordinateReduction {
    fn reduce_sq(self, v: &[f64]) -> f64 {
        match self {
            CoordinateReduction::First => v[0] * v[0],
            CoordinateReduction::Mean => norm_sq(v) / v.len() as f64,
        }
    }
}

/// Selector for the per-replicate statistics the Monte Carlo harness can record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Observable {
    /// `‖z^(ℓ)‖²`.
    SecondMoment,
    /// `‖z^(ℓ)‖² / ‖x‖²`.
    SecondMomentRatio,
    /// `(1/n_ℓ) Σ_j (z_j^(ℓ))⁴`.
    FourthMoment,
    /// Fourth moment divided by `(‖x‖²/n_0)²`.
    FourthMomentRatio,
    A,
    BPreIntegration,
    BGram,
    Btilde,
    /// `B̃^(ℓ) / n_ℓ`.
    BtildeOverWidth,
    C,
    Ctilde,
    /// `n_L · C̃^(ℓ)`.
    CtildeTimesWidth,
    DeltaZSq(UpdateMode),
    /// Linearized `(Δz)²` with the target integrated out analytically.
    DeltaZSqYIntegrated,
    CondProjResidual { m1: usize, m2: usize },
}

impl Observable {
    /// Whether a sample may legitimately be negative.
    pub fn is_signed(self) -> bool {
        matches!(self, Observable::CondProjResidual { .. })
    }

    /// Whether the observable is defined at `layer`; the residual needs `m1, m2 ≤ ℓ`.
    pub fn applies_at(self, layer: usize) -> bool {
        match self {
            Observable::CondProjResidual { m1, m2 } => m1 >= 1 && m2 >= 1 && m1.max(m2) <= layer,
            _ => true,
        }
    }

    fn needs_kernels(self) -> bool {
        matches!(
            self,
            Observable::BGram
                | Observable::Btilde
                | Observable::BtildeOverWidth
                | Observable::C
                | Observable::Ctilde
                | Observable::CtildeTimesWidth
        )
    }

    fn needs_cross(self) -> bool {
        matches!(
            self,
            Observable::A | Observable::BPreIntegration | Observable::DeltaZSqYIntegrated
        )
    }
}

impl fmt::Display for Observable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Observable::SecondMoment => f.write_str("second_moment"),
            Observable::SecondMomentRatio => f.write_str("second_moment_ratio"),
            Observable::FourthMoment => f.write_str("fourth_moment"),
            Observable::FourthMomentRatio => f.write_str("fourth_moment_ratio"),
            Observable::A => f.write_str("a"),
            Observable::BPreIntegration => f.write_str("b_pre"),
            Observable::BGram => f.write_str("b_gram"),
            Observable::Btilde => f.write_str("btilde"),
            Observable::BtildeOverWidth => f.write_str("btilde_over_n"),
            Observable::C => f.write_str("c"),
            Observable::Ctilde => f.write_str("ctilde"),
            Observable::CtildeTimesWidth => f.write_str("ctilde_times_n"),
            Observable::DeltaZSq(UpdateMode::Actual) => f.write_str("delta_z_sq_actual"),
            Observable::DeltaZSq(UpdateMode::Linearized) => f.write_str("delta_z_sq_linearized"),
            Observable::DeltaZSqYIntegrated => f.write_str("delta_z_sq_y_integrated"),
            Observable::CondProjResidual { m1, m2 } => write!(f, "cond_proj_residual_{m1}_{m2}"),
        }
    }
}

impl FromStr for Observable {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let obs = match s {
            "second_moment" => Observable::SecondMoment,
            "second_moment_ratio" => Observable::SecondMomentRatio,
            "fourth_moment" => Observable::FourthMoment,
            "fourth_moment_ratio" => Observable::FourthMomentRatio,
            "a" => Observable::A,
            "b_pre" => Observable::BPreIntegration,
            "b_gram" => Observable::BGram,
            "btilde" => Observable::Btilde,
            "btilde_over_n" => Observable::BtildeOverWidth,
            "c" => Observable::C,
            "ctilde" => Observable::Ctilde,
            "ctilde_times_n" => Observable::CtildeTimesWidth,
            "delta_z_sq_actual" | "delta_z_sq" => Observable::DeltaZSq(UpdateMode::Actual),
            "delta_z_sq_linearized" => Observable::DeltaZSq(UpdateMode::Linearized),
            "delta_z_sq_y_integrated" => Observable::DeltaZSqYIntegrated,
            other => {
                let parts: Vec<&str> = other
                    .strip_prefix("cond_proj_residual_")
                    .map(|rest| rest.split('_').collect())
                    .unwrap_or_default();
                match parts.as_slice() {
                    [a, b] => Observable::CondProjResidual {
                        m1: a.parse().map_err(|_| Error::Config(format!("bad observable `{s}`")))?,
                        m2: b.parse().map_err(|_| Error::Config(format!("bad observable `{s}`")))?,
                    },
                    _ => return Err(Error::Config(format!("unknown observable `{s}`"))),
                }
            }
        };
        Ok(obs)
    }
}

/// Replicated mean of one observable at one layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObservableEstimate {
    pub observable: Observable,
    pub layer: usize,
    pub mean: f64,
    pub stderr: f64,
    pub replicates: usize,
}

fn check_hidden(state: &NetworkState, layer: usize) -> Result<()> {
    let depth = state.depth();
    if layer == 0 || layer > depth {
        Err(Error::Layer { layer, max: depth })
    } else {
        Ok(())
    }
}

/// `‖z^(ℓ)‖²` for `ℓ = 1..=L`.
pub fn second_moment_profile(state: &NetworkState, x: &[f64]) -> Result<Vec<f64>> {
    let trace = forward(state, x)?;
    Ok((1..=state.depth()).map(|l| norm_sq(trace.preact(l))).collect())
}

/// `(1/n_ℓ) Σ_j (z_j^(ℓ))⁴` for `ℓ = 1..=L`.
pub fn fourth_moment_profile(state: &NetworkState, x: &[f64]) -> Result<Vec<f64>> {
    let trace = forward(state, x)?;
    Ok((1..=state.depth()).map(|l| fourth_moment(trace.preact(l))).collect())
}

fn fourth_moment(z: &[f64]) -> f64 {
    z.iter().map(|v| (v * v) * (v * v)).sum::<f64>() / z.len() as f64
}

/// `M^(m,ℓ) = s_m J^(m,ℓ) (J^(m,ℓ))ᵀ = Σ_{μ ∈ layer m} ∂_μ z^(ℓ) (∂_μ z^(ℓ))ᵀ`.
pub fn gram_sums(state: &NetworkState, trace: &ForwardTrace, m: usize, layer: usize) -> Result<Matrix> {
    let j = interlayer_jacobian(state, trace, m, layer)?;
    let mut g = j.matrix.matmul_nt(&j.matrix);
    g.scale(trace.fan_in_norm_sq(m));
    Ok(g)
}

/// The layer kernels `K^(1), ..., K^(up_to)` of one draw.
///
/// Kernels are stored for unit-normalized rates; `scale` is the largest rate.
#[derive(Debug, Clone)]
pub struct KernelStack {
    scale: f64,
    kernels: Vec<Matrix>,
    widths: Vec<usize>,
    sq_norms: Vec<f64>,
    preacts: Vec<Vec<f64>>,
}

impl KernelStack {
    pub fn new(
        state: &NetworkState,
        trace: &ForwardTrace,
        schedule: &LearningRateSchedule,
        up_to: usize,
    ) -> Result<Self> {
        check_hidden(state, up_to)?;
        check_len("learning-rate schedule length", state.num_layers(), schedule.len())?;
        let (scale, rates) = schedule.normalized();
        let mut kernels: Vec<Matrix> = Vec::with_capacity(up_to);
        for l in 1..=up_to {
            let mut k = match kernels.last() {
                None => Matrix::zeros(state.width(1), state.width(1)),
                Some(prev) => gated_congruence(state.weight(l), prev, &trace.active(l - 1)),
            };
            k.add_diagonal(rates[l - 1] * trace.fan_in_norm_sq(l));
            kernels.push(k);
        }
        Ok(KernelStack {
            scale,
            kernels,
            widths: state.widths(),
            sq_norms: (1..=up_to).map(|l| norm_sq(trace.preact(l))).collect(),
            preacts: (1..=up_to).map(|l| trace.preact(l).to_vec()).collect(),
        })
    }

    /// `K^(ℓ)` at the schedule's actual rates.
    pub fn kernel(&self, layer: usize) -> Matrix {
        self.kernels[layer - 1].scaled(self.scale)
    }

    fn norm(&self, layer: usize) -> f64 {
        let n_last = self.widths[self.widths.len() - 2] as f64;
        let n = self.widths[layer] as f64;
        n_last * n * n
    }

    /// `(1/(n_L n_ℓ²)) ‖K^(ℓ)‖_F²`.
    pub fn b_gram(&self, layer: usize) -> f64 {
        self.scale * self.scale * self.kernels[layer - 1].frobenius_sq() / self.norm(layer)
    }

    /// `(1/(n_{ℓ+1} n_L n_ℓ²)) (tr K^(ℓ))²`.
    pub fn btilde(&self, layer: usize) -> f64 {
        let t = self.kernels[layer - 1].trace();
        self.scale * self.scale * t * t / (self.norm(layer) * self.widths[layer + 1] as f64)
    }

    /// `(1/(n_L n_ℓ²)) ‖z^(ℓ)‖² tr K^(ℓ)`.
    pub fn c(&self, layer: usize) -> f64 {
        self.scale * self.sq_norms[layer - 1] * self.kernels[layer - 1].trace() / self.norm(layer)
    }

    /// `(1/(n_L n_ℓ²)) z^(ℓ)ᵀ K^(ℓ) z^(ℓ)`.
    pub fn ctilde(&self, layer: usize) -> f64 {
        self.scale * self.kernels[layer - 1].quadratic_form(&self.preacts[layer - 1]) / self.norm(layer)
    }

    pub fn width(&self, layer: usize) -> usize {
        self.widths[layer]
    }
}

/// Cross vectors `v^(ℓ)_i = Σ_{μ≤ℓ} η_μ ∂_μ z_i^(ℓ) ∂_μ z_k^(L+1)` for each readout `k`.
#[derive(Debug, Clone)]
pub struct CrossStack {
    /// `per_output[k][ℓ-1]`.
    per_output: Vec<Vec<Vec<f64>>>,
    output: Vec<f64>,
}

impl CrossStack {
    pub fn new(
        state: &NetworkState,
        trace: &ForwardTrace,
        schedule: &LearningRateSchedule,
        up_to: usize,
    ) -> Result<Self> {
        Self::for_outputs(state, trace, schedule, up_to, 1)
    }

    /// Builds the cross vectors for the first `outputs` readout coordinates.
    pub fn for_outputs(
        state: &NetworkState,
        trace: &ForwardTrace,
        schedule: &LearningRateSchedule,
        up_to: usize,
        outputs: usize,
    ) -> Result<Self> {
        check_hidden(state, up_to)?;
        check_len("learning-rate schedule length", state.num_layers(), schedule.len())?;
        let n_out = state.width(state.num_layers());
        let per_output = (0..outputs.min(n_out))
            .map(|k| {
                let mut seed = vec![0.0; n_out];
                seed[k] = 1.0;
                let sens = backprop(state, trace, &seed)?;
                Ok(rate_weighted_transport_all(state, trace, schedule, &sens, up_to))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CrossStack {
            per_output,
            output: trace.output().to_vec(),
        })
    }

    pub fn vector(&self, layer: usize) -> &[f64] {
        &self.per_output[0][layer - 1]
    }

    /// Pre-integration `B^(ℓ)`: `(v_i^(ℓ))²`.
    pub fn b_pre(&self, layer: usize, coords: CoordinateReduction) -> f64 {
        coords.reduce_sq(self.vector(layer))
    }

    /// Pre-integration `A^(ℓ)`: `(v_i^(ℓ))² (z_1^(L+1))²`.
    pub fn a(&self, layer: usize, coords: CoordinateReduction) -> f64 {
        let z = self.output[0];
        coords.reduce_sq(self.vector(layer)) * z * z
    }

    /// `E_y[(Δz_i^(ℓ))²]` of the linearized update for `y ~ N(0, (target/n_out) I)`:
    /// `(Σ_k z_k V_ik)² + (target/n_out) Σ_k V_ik²`. Needs all readout coordinates.
    pub fn y_integrated(&self, layer: usize, coords: CoordinateReduction, target_second_moment: f64) -> f64 {
        let n_out = self.output.len();
        assert_eq!(self.per_output.len(), n_out, "cross stack lacks readout coordinates");
        let var = target_second_moment / n_out as f64;
        let n = self.per_output[0][layer - 1].len();
        let per_neuron = |i: usize| {
            let mean: f64 = (0..n_out).map(|k| self.output[k] * self.per_output[k][layer - 1][i]).sum();
            let spread: f64 = (0..n_out).map(|k| self.per_output[k][layer - 1][i].powi(2)).sum();
            mean * mean + var * spread
        };
        match coords {
            CoordinateReduction::First => per_neuron(0),
            CoordinateReduction::Mean => (0..n).map(per_neuron).sum::<f64>() / n as f64,
        }
    }
}

pub fn sample_b(
    state: &NetworkState,
    trace: &ForwardTrace,
    schedule: &LearningRateSchedule,
    layer: usize,
) -> Result<ObservableSample> {
    let value = KernelStack::new(state, trace, schedule, layer)?.b_gram(layer);
    Ok(ObservableSample {
        which: Quantity::B,
        layer,
        value,
        variant: Variant::Gram,
    })
}

pub fn sample_b_preintegration(
    state: &NetworkState,
    trace: &ForwardTrace,
    schedule: &LearningRateSchedule,
    layer: usize,
) -> Result<ObservableSample> {
    let value = CrossStack::new(state, trace, schedule, layer)?.b_pre(layer, CoordinateReduction::First);
    Ok(ObservableSample {
        which: Quantity::B,
        layer,
        value,
        variant: Variant::PreIntegration,
    })
}

pub fn sample_a(
    state: &NetworkState,
    trace: &ForwardTrace,
    schedule: &LearningRateSchedule,
    layer: usize,
) -> Result<ObservableSample> {
    let value = CrossStack::new(state, trace, schedule, layer)?.a(layer, CoordinateReduction::First);
    Ok(ObservableSample {
        which: Quantity::A,
        layer,
        value,
        variant: Variant::PreIntegration,
    })
}

pub fn sample_c(
    state: &NetworkState,
    trace: &ForwardTrace,
    schedule: &LearningRateSchedule,
    layer: usize,
) -> Result<ObservableSample> {
    let value = KernelStack::new(state, trace, schedule, layer)?.c(layer);
    Ok(ObservableSample {
        which: Quantity::C,
        layer,
        value,
        variant: Variant::Gram,
    })
}

pub fn sample_btilde(
    state: &NetworkState,
    trace: &ForwardTrace,
    schedule: &LearningRateSchedule,
    layer: usize,
) -> Result<ObservableSample> {
    let value = KernelStack::new(state, trace, schedule, layer)?.btilde(layer);
    Ok(ObservableSample {
        which: Quantity::Btilde,
        layer,
        value,
        variant: Variant::Gram,
    })
}

pub fn sample_ctilde(
    state: &NetworkState,
    trace: &ForwardTrace,
    schedule: &LearningRateSchedule,
    layer: usize,
) -> Result<ObservableSample> {
    let value = KernelStack::new(state, trace, schedule, layer)?.ctilde(layer);
    Ok(ObservableSample {
        which: Quantity::Ctilde,
        layer,
        value,
        variant: Variant::Gram,
    })
}

/// `(Δz_i^(ℓ))²` for the sampled batch, exact or linearized.
pub fn sample_delta_z_sq(
    state: &NetworkState,
    batch: &Batch,
    schedule: &LearningRateSchedule,
    layer: usize,
    mode: UpdateMode,
    coords: CoordinateReduction,
) -> Result<ObservableSample> {
    check_hidden(state, layer)?;
    let dz = match mode {
        UpdateMode::Actual => delta_z_actual_all(state, &batch.x, &batch.y, schedule)?.swap_remove(layer - 1),
        UpdateMode::Linearized => {
            let trace = forward(state, &batch.x)?;
            crate::net::delta_z_linearized(state, &trace, &batch.y, schedule, layer)?.values
        }
    };
    Ok(ObservableSample {
        which: Quantity::DeltaZSq,
        layer,
        value: coords.reduce_sq(&dz),
        variant: Variant::PreIntegration,
    })
}

/// Single-draw residual of the conditional projection identity for the
/// parameter layers `m1, m2 ≤ ℓ`, weighted as it enters `B^(ℓ)` at neuron 1:
///
/// `Σ_{μ1∈m1, μ2∈m2} ∂_{μ1}z_1^(ℓ) ∂_{μ2}z_1^(ℓ) [ (1/n_L) Σ_j ∂_{μ1}z_j^(L) ∂_{μ2}z_j^(L)
///  − (1/n_ℓ) Σ_j ∂_{μ1}z_j^(ℓ) ∂_{μ2}z_j^(ℓ) ]`.
///
/// Its expectation over the weights is zero; it vanishes identically at `ℓ = L`.
pub fn cond_projection_residual(
    state: &NetworkState,
    trace: &ForwardTrace,
    m1: usize,
    m2: usize,
    layer: usize,
) -> Result<ObservableSample> {
    let depth = state.depth();
    check_hidden(state, layer)?;
    if m1 == 0 || m2 == 0 || m1 > layer || m2 > layer {
        return Err(Error::Config(format!(
            "parameter layers ({m1}, {m2}) must lie in 1..={layer}"
        )));
    }
    let (x1, y1) = projected_rows(state, trace, m1, layer, depth);
    let (x2, y2) = projected_rows(state, trace, m2, layer, depth);
    let s = trace.fan_in_norm_sq(m1) * trace.fan_in_norm_sq(m2);
    let value = if layer == depth {
        0.0
    } else {
        let n_last = state.width(depth) as f64;
        let n_l = state.width(layer) as f64;
        s * (dot(&x1, &x2) / n_last - dot(&y1, &y2) / n_l)
    };
    Ok(ObservableSample {
        which: Quantity::CondProjResidual,
        layer,
        value,
        variant: Variant::Gram,
    })
}

/// For `r = e_1ᵀ J^(m,ℓ)`, returns `(J^(m,L) rᵀ, J^(m,ℓ) rᵀ)`.
fn projected_rows(
    state: &NetworkState,
    trace: &ForwardTrace,
    m: usize,
    layer: usize,
    depth: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut r = vec![0.0; state.width(layer)];
    r[0] = 1.0;
    for k in (m + 1..=layer).rev() {
        r = state.weight(k).tmatvec(&r);
        gate(&mut r, trace.preact(k - 1));
    }
    let mut t = r;
    let mut at_layer = None;
    if m == layer {
        at_layer = Some(t.clone());
    }
    for k in m + 1..=depth {
        gate(&mut t, trace.preact(k - 1));
        t = state.weight(k).matvec(&t);
        if k == layer {
            at_layer = Some(t.clone());
        }
    }
    (t, at_layer.expect("layer within m..=L"))
}

/// Inputs shared by every observable of one replicate.
#[derive(Debug, Clone, Copy)]
pub struct EvalSettings {
    pub coords: CoordinateReduction,
    /// `E‖y‖²` of the target distribution the batch was drawn from.
    pub target_second_moment: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            coords: CoordinateReduction::First,
            target_second_moment: 1.0,
        }
    }
}

/// Evaluates every requested `(observable, layer)` cell on one draw,
/// sharing the forward trace, kernels and cross vectors between cells.
pub fn evaluate(
    state: &NetworkState,
    batch: &Batch,
    schedule: &LearningRateSchedule,
    cells: &[(Observable, usize)],
    settings: EvalSettings,
) -> Result<Vec<f64>> {
    for &(_, layer) in cells {
        check_hidden(state, layer)?;
    }
    let trace = forward(state, &batch.x)?;
    let max_layer = |pred: fn(Observable) -> bool| {
        cells
            .iter()
            .filter(|(o, _)| pred(*o))
            .map(|&(_, l)| l)
            .max()
    };
    let kernels = max_layer(Observable::needs_kernels)
        .map(|l| KernelStack::new(state, &trace, schedule, l))
        .transpose()?;
    let cross = max_layer(Observable::needs_cross)
        .map(|l| {
            let outputs = if cells.iter().any(|(o, _)| *o == Observable::DeltaZSqYIntegrated) {
                state.width(state.num_layers())
            } else {
                1
            };
            CrossStack::for_outputs(state, &trace, schedule, l, outputs)
        })
        .transpose()?;
    let actual = cells
        .iter()
        .any(|(o, _)| *o == Observable::DeltaZSq(UpdateMode::Actual))
        .then(|| delta_z_actual_all(state, &batch.x, &batch.y, schedule))
        .transpose()?;
    let linearized = match max_layer(|o| o == Observable::DeltaZSq(UpdateMode::Linearized)) {
        Some(l) => {
            let residual: Vec<f64> = batch.y.iter().zip(trace.output()).map(|(t, z)| t - z).collect();
            let sens = backprop(state, &trace, &residual)?;
            Some(rate_weighted_transport_all(state, &trace, schedule, &sens, l))
        }
        None => None,
    };
    let x_sq = norm_sq(&batch.x);
    let n0 = batch.x.len() as f64;
    let coords = settings.coords;

    let mut out = Vec::with_capacity(cells.len());
    for &(obs, l) in cells {
        let value = match obs {
            Observable::SecondMoment => norm_sq(trace.preact(l)),
            Observable::SecondMomentRatio => norm_sq(trace.preact(l)) / x_sq,
            Observable::FourthMoment => fourth_moment(trace.preact(l)),
            Observable::FourthMomentRatio => {
                let q = x_sq / n0;
                fourth_moment(trace.preact(l)) / (q * q)
            }
            Observable::A => cross.as_ref().expect("cross").a(l, coords),
            Observable::BPreIntegration => cross.as_ref().expect("cross").b_pre(l, coords),
            Observable::DeltaZSqYIntegrated => {
                cross
                    .as_ref()
                    .expect("cross")
                    .y_integrated(l, coords, settings.target_second_moment)
            }
            Observable::BGram => kernels.as_ref().expect("kernels").b_gram(l),
            Observable::Btilde => kernels.as_ref().expect("kernels").btilde(l),
            Observable::BtildeOverWidth => {
                kernels.as_ref().expect("kernels").btilde(l) / state.width(l) as f64
            }
            Observable::C => kernels.as_ref().expect("kernels").c(l),
            Observable::Ctilde => kernels.as_ref().expect("kernels").ctilde(l),
            Observable::CtildeTimesWidth => {
                kernels.as_ref().expect("kernels").ctilde(l) * state.width(state.depth()) as f64
            }
            Observable::DeltaZSq(UpdateMode::Actual) => coords.reduce_sq(&actual.as_ref().expect("actual")[l - 1]),
            Observable::DeltaZSq(UpdateMode::Linearized) => {
                coords.reduce_sq(&linearized.as_ref().expect("linearized")[l - 1])
            }
            Observable::CondProjResidual { m1, m2 } => cond_projection_residual(state, &trace, m1, m2, l)?.value,
        };
        if !value.is_finite() {
            return Err(Error::NonFinite("observable sample"));
        }
        if !obs.is_signed() && value < 0.0 {
            return Err(Error::Config(format!("{obs} sample at layer {l} is negative ({value})")));
        }
        out.push(value);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{init_network, InitVariant, NetworkConfig};
    use crate::rng::{Purpose, StreamKey};

    fn draw(widths: &[usize], seed: u64) -> (NetworkState, Batch) {
        let cfg = NetworkConfig::new(widths.to_vec(), InitVariant::MeanFieldExactHe, seed).unwrap();
        let state = init_network(&cfg, &mut StreamKey::new(seed, Purpose::Weights, 0, 0).stream()).unwrap();
        let batch = sample_batch(
            widths[0],
            *widths.last().unwrap(),
            &mut StreamKey::new(seed, Purpose::Batch, 0, 0).stream(),
        );
        (state, batch)
    }

    #[test]
    fn batch_is_deterministic_and_normalized() {
        let key = StreamKey::new(4, Purpose::Batch, 0, 0);
        assert_eq!(sample_batch(10, 3, &mut key.stream()), sample_batch(10, 3, &mut key.stream()));
        let big = sample_batch(1_000_000, 1, &mut key.stream());
        let r = norm_sq(&big.x) / 1e6;
        assert!((r - 1.0).abs() < 0.01, "{r}");
    }

    #[test]
    fn profiles_vanish_at_zero_input() {
        let (s, _) = draw(&[6, 5, 5, 1], 1);
        assert!(second_moment_profile(&s, &[0.0; 6]).unwrap().iter().all(|&v| v == 0.0));
        assert!(fourth_moment_profile(&s, &[0.0; 6]).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gram_sum_base_case_and_zero_input() {
        let (s, b) = draw(&[4, 5, 5, 1], 2);
        let t = forward(&s, &b.x).unwrap();
        let m = gram_sums(&s, &t, 2, 2).unwrap();
        let mut expected = Matrix::identity(5);
        expected.scale(t.fan_in_norm_sq(2));
        assert_eq!(m, expected);
        let t0 = forward(&s, &[0.0; 4]).unwrap();
        assert_eq!(gram_sums(&s, &t0, 1, 2).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn kernel_is_the_rate_weighted_sum_of_gram_sums() {
        let (s, b) = draw(&[5, 6, 4, 6, 1], 3);
        let t = forward(&s, &b.x).unwrap();
        let sched = LearningRateSchedule::new(vec![0.3, 1.1, 0.7, 0.2]).unwrap();
        let stack = KernelStack::new(&s, &t, &sched, 3).unwrap();
        let mut sum = Matrix::zeros(6, 6);
        for m in 1..=3 {
            let g = gram_sums(&s, &t, m, 3).unwrap();
            for (d, v) in sum.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *d += sched.rate(m) * v;
            }
        }
        assert!(stack.kernel(3).max_abs_diff(&sum) <= 1e-12 * sum.max_abs());
    }

    #[test]
    fn zero_schedule_gives_zero_observables() {
        let (s, b) = draw(&[4, 5, 5, 5, 1], 5);
        let t = forward(&s, &b.x).unwrap();
        let zero = LearningRateSchedule::global(0.0, 3).unwrap();
        for l in 1..=3 {
            assert_eq!(sample_b(&s, &t, &zero, l).unwrap().value, 0.0);
            assert_eq!(sample_b_preintegration(&s, &t, &zero, l).unwrap().value, 0.0);
            assert_eq!(sample_a(&s, &t, &zero, l).unwrap().value, 0.0);
            assert_eq!(sample_c(&s, &t, &zero, l).unwrap().value, 0.0);
            assert_eq!(sample_btilde(&s, &t, &zero, l).unwrap().value, 0.0);
            assert_eq!(sample_ctilde(&s, &t, &zero, l).unwrap().value, 0.0);
            for mode in [UpdateMode::Actual, UpdateMode::Linearized] {
                let v = sample_delta_z_sq(&s, &b, &zero, l, mode, CoordinateReduction::First).unwrap();
                assert_eq!(v.value, 0.0);
            }
        }
    }

    #[test]
    fn linearized_delta_sq_scales_as_rate_squared() {
        let (s, b) = draw(&[6, 8, 8, 8, 1], 6);
        let unit = LearningRateSchedule::global(1.0, 3).unwrap();
        let base = sample_delta_z_sq(&s, &b, &unit, 3, UpdateMode::Linearized, CoordinateReduction::First)
            .unwrap()
            .value;
        for eta in [0.5, 0.125, 3.0] {
            let sched = LearningRateSchedule::global(eta, 3).unwrap();
            let v = sample_delta_z_sq(&s, &b, &sched, 3, UpdateMode::Linearized, CoordinateReduction::First)
                .unwrap()
                .value;
            assert_eq!(v, eta * eta * base);
        }
    }

    #[test]
    fn residual_is_zero_at_the_last_hidden_layer_and_at_zero_input() {
        let (s, b) = draw(&[5, 5, 5, 5, 1], 7);
        let t = forward(&s, &b.x).unwrap();
        assert_eq!(cond_projection_residual(&s, &t, 1, 2, 3).unwrap().value, 0.0);
        let t0 = forward(&s, &[0.0; 5]).unwrap();
        assert_eq!(cond_projection_residual(&s, &t0, 1, 1, 2).unwrap().value, 0.0);
        assert!(cond_projection_residual(&s, &t, 3, 1, 2).is_err());
    }

    #[test]
    fn y_integrated_matches_a_plus_b_for_scalar_readout() {
        let (s, b) = draw(&[6, 7, 7, 1], 8);
        let t = forward(&s, &b.x).unwrap();
        let sched = LearningRateSchedule::global(0.4, 2).unwrap();
        let cross = CrossStack::for_outputs(&s, &t, &sched, 2, 1).unwrap();
        for coords in [CoordinateReduction::First, CoordinateReduction::Mean] {
            let lhs = cross.y_integrated(2, coords, 1.0);
            let rhs = cross.a(2, coords) + cross.b_pre(2, coords);
            assert!((lhs - rhs).abs() <= 1e-14 * rhs);
        }
    }

    #[test]
    fn observable_names_round_trip() {
        let all = [
            Observable::SecondMoment,
            Observable::SecondMomentRatio,
            Observable::FourthMoment,
            Observable::FourthMomentRatio,
            Observable::A,
            Observable::BPreIntegration,
            Observable::BGram,
            Observable::Btilde,
            Observable::BtildeOverWidth,
            Observable::C,
            Observable::Ctilde,
            Observable::CtildeTimesWidth,
            Observable::DeltaZSq(UpdateMode::Actual),
            Observable::DeltaZSq(UpdateMode::Linearized),
            Observable::DeltaZSqYIntegrated,
            Observable::CondProjResidual { m1: 2, m2: 5 },
        ];
        for o in all {
            assert_eq!(o.to_string().parse::<Observable>().unwrap(), o);
        }
        assert!("nope".parse::<Observable>().is_err());
    }

    #[test]
    fn evaluate_rejects_output_layer_and_agrees_with_single_samples() {
        let (s, b) = draw(&[5, 6, 6, 6, 1], 9);
        let sched = LearningRateSchedule::global(0.2, 3).unwrap();
        assert!(evaluate(&s, &b, &sched, &[(Observable::C, 4)], EvalSettings::default()).is_err());
        let t = forward(&s, &b.x).unwrap();
        let cells = [
            (Observable::BGram, 2),
            (Observable::C, 3),
            (Observable::A, 1),
            (Observable::DeltaZSq(UpdateMode::Actual), 3),
        ];
        let v = evaluate(&s, &b, &sched, &cells, EvalSettings::default()).unwrap();
        assert_eq!(v[0], sample_b(&s, &t, &sched, 2).unwrap().value);
        assert_eq!(v[1], sample_c(&s, &t, &sched, 3).unwrap().value);
        assert_eq!(v[2], sample_a(&s, &t, &sched, 1).unwrap().value);
        let dz = sample_delta_z_sq(&s, &b, &sched, 3, UpdateMode::Actual, CoordinateReduction::First).unwrap();
        assert_eq!(v[3], dz.value);
    }
}
