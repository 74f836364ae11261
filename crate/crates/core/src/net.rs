//! Bias-free ReLU networks: initialization, forward pass, exact gradients,
//! interlayer Jacobians and the one-step gradient-descent update.
//!
//! Layers are numbered the usual way: layer 0 is the input, layers
//! `1..=L` are hidden, and layer `L+1` is the linear readout. `W^(ℓ)` maps
//! layer `ℓ-1` to layer `ℓ` and has shape `n_ℓ × n_{ℓ-1}`.
//!
//! `σ(t) = max(0, t)` with `σ'(0) = 0` everywhere (forward gating, Jacobians
//! and backprop use the same `z > 0` test).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::linalg::{norm_sq, Matrix};
use crate::rng::gaussian_vec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub enum InitVariant {
    /// First-layer variance `2/n_0`, exactly as the mean-field scheme is usually written.
    MeanFieldPaper,
    /// First-layer variance `1/n_0`, so that `E‖z^(ℓ)‖² = ‖x‖²` holds at every hidden layer.
    #[default]
    MeanFieldExactHe,
}

impl InitVariant {
    /// Ratio `E‖z^(1)‖² / ‖x‖²` implied by the first-layer variance.
    pub fn first_layer_gain(self) -> f64 {
        match self {
            InitVariant::MeanFieldPaper => 2.0,
            InitVariant::MeanFieldExactHe => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    widths: Vec<usize>,
    pub init_variant: InitVariant,
    pub master_seed: u64,
}

impl NetworkConfig {
    /// `widths = [n_0, n_1, ..., n_L, n_{L+1}]` with `L ≥ 1`.
    pub fn new(widths: Vec<usize>, init_variant: InitVariant, master_seed: u64) -> Result<Self> {
        if widths.len() < 3 {
            return Err(Error::Config(format!(
                "need at least one hidden layer (widths has {} entries, minimum 3)",
                widths.len()
            )));
        }
        if let Some(pos) = widths.iter().position(|&w| w == 0) {
            return Err(Error::Config(format!("layer {pos} has zero width")));
        }
        Ok(NetworkConfig {
            widths,
            init_variant,
            master_seed,
        })
    }

    /// Input and hidden widths `n`, readout width `n_out`.
    pub fn uniform(width: usize, depth: usize, n_out: usize) -> Result<Self> {
        let mut widths = vec![width; depth + 1];
        widths.push(n_out);
        Self::new(widths, InitVariant::default(), 0)
    }

    pub fn with_variant(mut self, variant: InitVariant) -> Self {
        self.init_variant = variant;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.master_seed = seed;
        self
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    /// Number of hidden layers `L`.
    pub fn depth(&self) -> usize {
        self.widths.len() - 2
    }

    pub fn width(&self, layer: usize) -> usize {
        self.widths[layer]
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        self.widths[self.widths.len() - 1]
    }

    /// Width of the last hidden layer, `n_L`.
    pub fn last_hidden(&self) -> usize {
        self.widths[self.depth()]
    }

    /// Smallest hidden width.
    pub fn min_hidden(&self) -> usize {
        self.widths[1..=self.depth()].iter().copied().min().unwrap_or(1)
    }

    /// Initialization variance of the entries of `W^(layer)`.
    pub fn weight_variance(&self, layer: usize) -> f64 {
        let depth = self.depth();
        let fan_in = self.widths[layer - 1] as f64;
        if layer == depth + 1 {
            let n_l = self.widths[depth] as f64;
            1.0 / (n_l * n_l)
        } else if layer == 1 {
            match self.init_variant {
                InitVariant::MeanFieldPaper => 2.0 / fan_in,
                InitVariant::MeanFieldExactHe => 1.0 / fan_in,
            }
        } else {
            2.0 / fan_in
        }
    }
}

/// The weight matrices `W^(1), ..., W^(L+1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkState {
    weights: Vec<Matrix>,
}

impl NetworkState {
    /// Builds a state from explicit matrices; consecutive shapes must chain.
    pub fn from_weights(weights: Vec<Matrix>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Config("a network needs at least one weight matrix".into()));
        }
        for pair in weights.windows(2) {
            check_len("chained layer width", pair[0].rows(), pair[1].cols())?;
        }
        if weights.iter().any(|w| w.rows() == 0 || w.cols() == 0) {
            return Err(Error::Config("zero-width layer".into()));
        }
        if !weights.iter().all(Matrix::is_finite) {
            return Err(Error::NonFinite("weights"));
        }
        Ok(NetworkState { weights })
    }

    /// Number of weight matrices, `L + 1`.
    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    /// Number of hidden layers `L` (zero for a purely linear map).
    pub fn depth(&self) -> usize {
        self.weights.len() - 1
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.weights.len() + 1);
        w.push(self.weights[0].cols());
        w.extend(self.weights.iter().map(Matrix::rows));
        w
    }

    pub fn width(&self, layer: usize) -> usize {
        if layer == 0 {
            self.weights[0].cols()
        } else {
            self.weights[layer - 1].rows()
        }
    }

    /// `W^(layer)`, 1-based.
    pub fn weight(&self, layer: usize) -> &Matrix {
        &self.weights[layer - 1]
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn num_parameters(&self) -> usize {
        self.weights.iter().map(|w| w.rows() * w.cols()).sum()
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer == 0 || layer > self.num_layers() {
            Err(Error::Layer {
                layer,
                max: self.num_layers(),
            })
        } else {
            Ok(())
        }
    }
}

/// Draws every weight independently from the mean-field Gaussian.
///
/// Matrices are filled layer by layer in row-major order from `stream`.
pub fn init_network<R: Rng + ?Sized>(config: &NetworkConfig, stream: &mut R) -> Result<NetworkState> {
    let widths = config.widths();
    if widths.iter().any(|&w| w == 0) {
        return Err(Error::Config("zero-width layer".into()));
    }
    let weights = (1..widths.len())
        .map(|layer| {
            let std = config.weight_variance(layer).sqrt();
            let (rows, cols) = (widths[layer], widths[layer - 1]);
            Matrix::from_vec(rows, cols, gaussian_vec(stream, rows * cols, std))
        })
        .collect();
    Ok(NetworkState { weights })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningRateSchedule {
    per_layer: Vec<f64>,
}

impl LearningRateSchedule {
    /// One rate per weight matrix `W^(1..=L+1)`.
    pub fn new(per_layer: Vec<f64>) -> Result<Self> {
        if per_layer.is_empty() {
            return Err(Error::Config("empty learning-rate schedule".into()));
        }
        if per_layer.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::Config("learning rates must be finite and non-negative".into()));
        }
        Ok(LearningRateSchedule { per_layer })
    }

    /// The same rate `eta` for all `depth + 1` weight matrices.
    pub fn global(eta: f64, depth: usize) -> Result<Self> {
        Self::new(vec![eta; depth + 1])
    }

    pub fn rate(&self, layer: usize) -> f64 {
        self.per_layer[layer - 1]
    }

    pub fn rates(&self) -> &[f64] {
        &self.per_layer
    }

    pub fn len(&self) -> usize {
        self.per_layer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_layer.is_empty()
    }

    /// `Some(eta)` if every layer uses the same rate.
    pub fn as_global(&self) -> Option<f64> {
        let first = self.per_layer[0];
        self.per_layer.iter().all(|&r| r == first).then_some(first)
    }

    pub fn max_rate(&self) -> f64 {
        self.per_layer.iter().copied().fold(0.0, f64::max)
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.per_layer.iter().map(|r| r * factor).collect())
    }

    /// Splits the schedule into `(scale, rates / scale)` with `scale` the
    /// largest rate. A global schedule normalizes to exact ones, which makes
    /// every rate-linear quantity exactly `scale ×` its unit-rate value.
    pub(crate) fn normalized(&self) -> (f64, Vec<f64>) {
        let scale = self.max_rate();
        if scale == 0.0 {
            return (0.0, vec![0.0; self.per_layer.len()]);
        }
        (scale, self.per_layer.iter().map(|r| r / scale).collect())
    }

    fn check_for(&self, state: &NetworkState) -> Result<()> {
        check_len("learning-rate schedule length", state.num_layers(), self.per_layer.len())
    }
}

/// Input and all pre-activations `z^(1), ..., z^(L+1)` of one forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardTrace {
    pub input: Vec<f64>,
    pub preacts: Vec<Vec<f64>>,
}

impl ForwardTrace {
    /// `z^(layer)` for `layer ≥ 1`.
    pub fn preact(&self, layer: usize) -> &[f64] {
        &self.preacts[layer - 1]
    }

    pub fn output(&self) -> &[f64] {
        self.preacts.last().expect("trace has at least one layer")
    }

    /// `σ(z^(layer))`, with `σ(z^(0)) ≔ x`.
    pub fn activation(&self, layer: usize) -> Vec<f64> {
        if layer == 0 {
            self.input.clone()
        } else {
            relu(self.preact(layer))
        }
    }

    /// `1{z^(layer)_j > 0}` for a hidden layer.
    pub fn active(&self, layer: usize) -> Vec<bool> {
        self.preact(layer).iter().map(|&z| z > 0.0).collect()
    }

    /// `‖σ(z^(layer-1))‖²`: the squared norm of the input to `W^(layer)`.
    pub fn fan_in_norm_sq(&self, layer: usize) -> f64 {
        if layer == 1 {
            norm_sq(&self.input)
        } else {
            self.preact(layer - 1)
                .iter()
                .map(|&z| if z > 0.0 { z * z } else { 0.0 })
                .sum()
        }
    }
}

pub fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&t| if t > 0.0 { t } else { 0.0 }).collect()
}

/// Zeroes `v` wherever `z ≤ 0`.
pub(crate) fn gate(v: &mut [f64], z: &[f64]) {
    for (vi, &zi) in v.iter_mut().zip(z) {
        if zi <= 0.0 {
            *vi = 0.0;
        }
    }
}

pub fn forward(state: &NetworkState, x: &[f64]) -> Result<ForwardTrace> {
    check_len("input dimension", state.width(0), x.len())?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("input"));
    }
    let mut preacts = Vec::with_capacity(state.num_layers());
    let mut h = x.to_vec();
    for (k, w) in state.weights.iter().enumerate() {
        let z = w.matvec(&h);
        if k + 1 < state.num_layers() {
            h = relu(&z);
        }
        preacts.push(z);
    }
    Ok(ForwardTrace {
        input: x.to_vec(),
        preacts,
    })
}

/// `∂z^(to) / ∂z^(from)` at a given trace.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerJacobian {
    pub from_layer: usize,
    pub to_layer: usize,
    pub matrix: Matrix,
}

/// `J^(m,ℓ) = W^(ℓ) D^(ℓ-1) W^(ℓ-1) ··· W^(m+1) D^(m)`, accumulated from the
/// right (`J ← W^(k) · (D^(k-1) J)` for `k = m+1..=ℓ`); identity when `m = ℓ`.
pub fn interlayer_jacobian(
    state: &NetworkState,
    trace: &ForwardTrace,
    from: usize,
    to: usize,
) -> Result<LayerJacobian> {
    state.check_layer(from)?;
    state.check_layer(to)?;
    if from > to {
        return Err(Error::LayerOrder { from, to });
    }
    let mut j = Matrix::identity(state.width(from));
    for k in from + 1..=to {
        let z = trace.preact(k - 1);
        for (r, &zr) in z.iter().enumerate() {
            if zr <= 0.0 {
                j.row_mut(r).fill(0.0);
            }
        }
        j = state.weight(k).matmul(&j);
    }
    Ok(LayerJacobian {
        from_layer: from,
        to_layer: to,
        matrix: j,
    })
}

/// Index `μ = (layer, row, col)` of the weight `W^(layer)_{row,col}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParameterCoordinate {
    pub layer: usize,
    pub row: usize,
    pub col: usize,
}

impl ParameterCoordinate {
    pub fn all(state: &NetworkState, up_to_layer: usize) -> Vec<ParameterCoordinate> {
        let mut out = Vec::new();
        for layer in 1..=up_to_layer.min(state.num_layers()) {
            let w = state.weight(layer);
            for row in 0..w.rows() {
                for col in 0..w.cols() {
                    out.push(ParameterCoordinate { layer, row, col });
                }
            }
        }
        out
    }
}

/// `∂z^(ℓ) / ∂W^(m)_{ab}`, obtained by pushing the tangent `e_a · σ(z^(m-1))_b`
/// forward through layers `m+1..=ℓ`. Zero when `m > ℓ`.
///
/// This is a per-parameter reference path; the Gram-based observables never call it.
pub fn preactivation_param_gradient(
    state: &NetworkState,
    trace: &ForwardTrace,
    mu: ParameterCoordinate,
    layer: usize,
) -> Result<Vec<f64>> {
    state.check_layer(layer)?;
    state.check_layer(mu.layer)?;
    let w = state.weight(mu.layer);
    if mu.row >= w.rows() || mu.col >= w.cols() {
        return Err(Error::Config(format!(
            "parameter ({}, {}, {}) outside a {}×{} matrix",
            mu.layer,
            mu.row,
            mu.col,
            w.rows(),
            w.cols()
        )));
    }
    if mu.layer > layer {
        return Ok(vec![0.0; state.width(layer)]);
    }
    let input = if mu.layer == 1 {
        trace.input[mu.col]
    } else {
        trace.preact(mu.layer - 1)[mu.col].max(0.0)
    };
    let mut t = vec![0.0; w.rows()];
    t[mu.row] = input;
    for k in mu.layer + 1..=layer {
        gate(&mut t, trace.preact(k - 1));
        t = state.weight(k).matvec(&t);
    }
    Ok(t)
}

/// `∂L/∂W^(m)` for every layer, same shapes as the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterGradients {
    pub grads: Vec<Matrix>,
}

impl ParameterGradients {
    pub fn layer(&self, layer: usize) -> &Matrix {
        &self.grads[layer - 1]
    }

    pub fn zeros_like(state: &NetworkState) -> Self {
        ParameterGradients {
            grads: state
                .weights
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect(),
        }
    }
}

/// Reverse accumulation of `seed` from the readout: returns
/// `s^(m) = (J^(m,L+1))ᵀ · seed` for `m = 1..=L+1` (index `m-1`).
pub fn backprop(state: &NetworkState, trace: &ForwardTrace, seed: &[f64]) -> Result<Vec<Vec<f64>>> {
    let top = state.num_layers();
    check_len("readout seed", state.width(top), seed.len())?;
    let mut out = vec![Vec::new(); top];
    out[top - 1] = seed.to_vec();
    for m in (1..top).rev() {
        let mut s = state.weight(m + 1).tmatvec(&out[m]);
        gate(&mut s, trace.preact(m));
        out[m - 1] = s;
    }
    Ok(out)
}

/// Gradient of `½‖z^(L+1) − y‖²` with respect to every weight.
pub fn loss_gradient(state: &NetworkState, trace: &ForwardTrace, y: &[f64]) -> Result<ParameterGradients> {
    let out = trace.output();
    check_len("target dimension", out.len(), y.len())?;
    let residual: Vec<f64> = out.iter().zip(y).map(|(z, t)| z - t).collect();
    let sens = backprop(state, trace, &residual)?;
    let grads = (1..=state.num_layers())
        .map(|m| {
            let a = trace.activation(m - 1);
            let e = &sens[m - 1];
            let mut g = Matrix::zeros(e.len(), a.len());
            for (i, &ei) in e.iter().enumerate() {
                if ei != 0.0 {
                    for (gij, &aj) in g.row_mut(i).iter_mut().zip(&a) {
                        *gij = ei * aj;
                    }
                }
            }
            g
        })
        .collect();
    Ok(ParameterGradients { grads })
}

/// `W^(ℓ) ← W^(ℓ) − η_ℓ ∂L/∂W^(ℓ)`; returns a new state.
pub fn gd_step(
    state: &NetworkState,
    grads: &ParameterGradients,
    schedule: &LearningRateSchedule,
) -> Result<NetworkState> {
    schedule.check_for(state)?;
    check_len("gradient layer count", state.num_layers(), grads.grads.len())?;
    let mut weights = Vec::with_capacity(state.num_layers());
    for (k, (w, g)) in state.weights.iter().zip(&grads.grads).enumerate() {
        if w.shape() != g.shape() {
            return Err(Error::Dimension {
                what: "gradient shape",
                expected: w.rows() * w.cols(),
                got: g.rows() * g.cols(),
            });
        }
        let eta = schedule.per_layer[k];
        let mut next = w.clone();
        if eta != 0.0 {
            for (v, &d) in next.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *v -= eta * d;
            }
        }
        weights.push(next);
    }
    Ok(NetworkState { weights })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum UpdateMode {
    Actual,
    Linearized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaZResult {
    pub layer: usize,
    pub values: Vec<f64>,
    pub mode: UpdateMode,
}

/// Exact change of `z^(ℓ)(x)` after one GD step on the batch `(x, y)`.
pub fn delta_z_actual(
    state: &NetworkState,
    x: &[f64],
    y: &[f64],
    schedule: &LearningRateSchedule,
    layer: usize,
) -> Result<DeltaZResult> {
    state.check_layer(layer)?;
    let before = forward(state, x)?;
    let grads = loss_gradient(state, &before, y)?;
    let stepped = gd_step(state, &grads, schedule)?;
    let after = forward(&stepped, x)?;
    let values = after
        .preact(layer)
        .iter()
        .zip(before.preact(layer))
        .map(|(a, b)| a - b)
        .collect();
    Ok(DeltaZResult {
        layer,
        values,
        mode: UpdateMode::Actual,
    })
}

/// First-order change `Δz^(ℓ) = Σ_{m≤ℓ} η_m ‖σ(z^(m-1))‖² J^(m,ℓ) δ^(m)`,
/// with `δ^(m) = (J^(m,L+1))ᵀ (y − z^(L+1))`.
///
/// This is the Gram identity `Σ_{μ∈m} ∂_μ z^(ℓ) ∂_μ z^(L+1) = J^(m,ℓ)(J^(m,L+1))ᵀ ‖σ(z^(m-1))‖²`
/// evaluated by the forward recursion `u ← W^(k) D^(k-1) u + η_k s_k δ^(k)`.
pub fn delta_z_linearized(
    state: &NetworkState,
    trace: &ForwardTrace,
    y: &[f64],
    schedule: &LearningRateSchedule,
    layer: usize,
) -> Result<DeltaZResult> {
    state.check_layer(layer)?;
    schedule.check_for(state)?;
    let out = trace.output();
    check_len("target dimension", out.len(), y.len())?;
    let residual: Vec<f64> = y.iter().zip(out).map(|(t, z)| t - z).collect();
    let sens = backprop(state, trace, &residual)?;
    let values = rate_weighted_transport(state, trace, schedule, &sens, layer);
    Ok(DeltaZResult {
        layer,
        values,
        mode: UpdateMode::Linearized,
    })
}

/// `Σ_{m≤ℓ} η_m s_m J^(m,ℓ) v^(m)` for per-layer vectors `v^(m)` (index `m-1`).
pub(crate) fn rate_weighted_transport(
    state: &NetworkState,
    trace: &ForwardTrace,
    schedule: &LearningRateSchedule,
    per_layer: &[Vec<f64>],
    layer: usize,
) -> Vec<f64> {
    rate_weighted_transport_all(state, trace, schedule, per_layer, layer)
        .pop()
        .expect("layer >= 1")
}

/// Same as [`rate_weighted_transport`] for every layer `1..=up_to`.
///
/// Computed with unit-normalized rates and rescaled once at the end, so a
/// global schedule gives results exactly proportional to its rate.
pub(crate) fn rate_weighted_transport_all(
    state: &NetworkState,
    trace: &ForwardTrace,
    schedule: &LearningRateSchedule,
    per_layer: &[Vec<f64>],
    up_to: usize,
) -> Vec<Vec<f64>> {
    let (scale, rates) = schedule.normalized();
    let mut out = Vec::with_capacity(up_to);
    let mut u = vec![0.0; state.width(1)];
    for m in 1..=up_to {
        if m > 1 {
            gate(&mut u, trace.preact(m - 1));
            u = state.weight(m).matvec(&u);
        }
        let c = rates[m - 1] * trace.fan_in_norm_sq(m);
        if c != 0.0 {
            for (ui, &vi) in u.iter_mut().zip(&per_layer[m - 1]) {
                *ui += c * vi;
            }
        }
        out.push(u.iter().map(|v| v * scale).collect());
    }
    out
}

/// Exact one-step change `Δz^(ℓ)` for every layer `ℓ = 1..=L+1` (index `ℓ-1`).
pub fn delta_z_actual_all(
    state: &NetworkState,
    x: &[f64],
    y: &[f64],
    schedule: &LearningRateSchedule,
) -> Result<Vec<Vec<f64>>> {
    let before = forward(state, x)?;
    let grads = loss_gradient(state, &before, y)?;
    let stepped = gd_step(state, &grads, schedule)?;
    let after = forward(&stepped, x)?;
    Ok(after
        .preacts
        .iter()
        .zip(&before.preacts)
        .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p - q).collect())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Purpose, StreamKey};

    fn scalar_net(ws: &[f64]) -> NetworkState {
        NetworkState::from_weights(ws.iter().map(|&w| Matrix::from_vec(1, 1, vec![w])).collect()).unwrap()
    }

    fn random_state(widths: &[usize], seed: u64) -> NetworkState {
        let cfg = NetworkConfig::new(widths.to_vec(), InitVariant::MeanFieldExactHe, seed).unwrap();
        init_network(&cfg, &mut StreamKey::new(seed, Purpose::Weights, 0, 0).stream()).unwrap()
    }

    #[test]
    fn config_rejects_zero_width_and_missing_hidden_layer() {
        assert!(NetworkConfig::new(vec![2, 0, 1], InitVariant::default(), 0).is_err());
        assert!(NetworkConfig::new(vec![2, 1], InitVariant::default(), 0).is_err());
        let cfg = NetworkConfig::uniform(8, 3, 1).unwrap();
        assert_eq!(cfg.depth(), 3);
        assert_eq!(cfg.widths(), &[8, 8, 8, 8, 1]);
    }

    #[test]
    fn variances_follow_the_mean_field_scheme() {
        let cfg = NetworkConfig::new(vec![4, 4, 4, 4], InitVariant::MeanFieldPaper, 0).unwrap();
        assert_eq!(cfg.weight_variance(1), 0.5);
        assert_eq!(cfg.weight_variance(2), 0.5);
        assert_eq!(cfg.weight_variance(3), 1.0 / 16.0);
        let he = cfg.clone().with_variant(InitVariant::MeanFieldExactHe);
        assert_eq!(he.weight_variance(1), 0.25);
    }

    #[test]
    fn init_shapes_and_determinism() {
        let cfg = NetworkConfig::new(vec![2, 3, 1], InitVariant::MeanFieldExactHe, 5).unwrap();
        let key = StreamKey::new(5, Purpose::Weights, 0, 0);
        let a = init_network(&cfg, &mut key.stream()).unwrap();
        let b = init_network(&cfg, &mut key.stream()).unwrap();
        assert_eq!(a.weight(1).shape(), (3, 2));
        assert_eq!(a.weight(2).shape(), (1, 3));
        assert_eq!(a, b);
    }

    #[test]
    fn forward_hand_example() {
        let s = scalar_net(&[2.0, 3.0]);
        let t = forward(&s, &[-1.0]).unwrap();
        assert_eq!(t.preact(1), &[-2.0]);
        assert_eq!(t.preact(2), &[0.0]);
    }

    #[test]
    fn forward_zero_input_gives_zero_preacts() {
        let s = random_state(&[5, 4, 6, 2], 1);
        let t = forward(&s, &[0.0; 5]).unwrap();
        assert!(t.preacts.iter().flatten().all(|&z| z == 0.0));
    }

    #[test]
    fn forward_rejects_wrong_input_length() {
        let s = random_state(&[3, 4, 1], 2);
        assert!(matches!(forward(&s, &[1.0; 4]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn forward_is_reproducible_bit_for_bit() {
        let s = random_state(&[6, 7, 5, 1], 3);
        let x = [0.3, -1.2, 0.8, 2.0, -0.1, 0.5];
        assert_eq!(forward(&s, &x).unwrap(), forward(&s, &x).unwrap());
    }

    #[test]
    fn jacobian_base_case_and_single_path() {
        let s = scalar_net(&[1.5, -0.7]);
        let t = forward(&s, &[2.0]).unwrap();
        let id = interlayer_jacobian(&s, &t, 2, 2).unwrap();
        assert_eq!(id.matrix, Matrix::identity(1));
        let j = interlayer_jacobian(&s, &t, 1, 2).unwrap();
        assert_eq!(j.matrix.get(0, 0), -0.7);
        assert!(matches!(
            interlayer_jacobian(&s, &t, 2, 1),
            Err(Error::LayerOrder { .. })
        ));
    }

    #[test]
    fn param_gradient_in_own_layer_is_kronecker_times_input() {
        let s = random_state(&[3, 4, 4, 1], 4);
        let x = [0.5, -1.0, 1.5];
        let t = forward(&s, &x).unwrap();
        let h = t.activation(1);
        for a in 0..4 {
            for b in 0..4 {
                let mu = ParameterCoordinate { layer: 2, row: a, col: b };
                let g = preactivation_param_gradient(&s, &t, mu, 2).unwrap();
                for (i, gi) in g.iter().enumerate() {
                    let expected = if i == a { h[b] } else { 0.0 };
                    assert_eq!(*gi, expected);
                }
            }
        }
        let later = ParameterCoordinate { layer: 3, row: 0, col: 1 };
        assert_eq!(preactivation_param_gradient(&s, &t, later, 2).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn scalar_loss_gradient() {
        let (w, x0, y0) = (1.3, 0.7, -0.4);
        let s = scalar_net(&[w]);
        let t = forward(&s, &[x0]).unwrap();
        let g = loss_gradient(&s, &t, &[y0]).unwrap();
        assert_eq!(g.layer(1).get(0, 0), (w * x0 - y0) * x0);
    }

    #[test]
    fn gradient_vanishes_at_the_target() {
        let s = random_state(&[4, 5, 3], 6);
        let t = forward(&s, &[1.0, -0.5, 0.25, 2.0]).unwrap();
        let y = t.output().to_vec();
        let g = loss_gradient(&s, &t, &y).unwrap();
        assert!(g.grads.iter().all(|m| m.max_abs() == 0.0));
    }

    #[test]
    fn gd_step_arithmetic_and_identities() {
        let s = scalar_net(&[1.0]);
        let g = ParameterGradients {
            grads: vec![Matrix::from_vec(1, 1, vec![2.0])],
        };
        let sched = LearningRateSchedule::global(0.1, 0).unwrap();
        let next = gd_step(&s, &g, &sched).unwrap();
        assert!((next.weight(1).get(0, 0) - 0.8).abs() < 1e-15);
        assert_eq!(s.weight(1).get(0, 0), 1.0);

        let r = random_state(&[3, 3, 1], 7);
        let t = forward(&r, &[1.0, 2.0, -1.0]).unwrap();
        let grads = loss_gradient(&r, &t, &[0.5]).unwrap();
        let zero = LearningRateSchedule::global(0.0, 1).unwrap();
        assert_eq!(gd_step(&r, &grads, &zero).unwrap(), r);
        let any = LearningRateSchedule::global(0.3, 1).unwrap();
        assert_eq!(gd_step(&r, &ParameterGradients::zeros_like(&r), &any).unwrap(), r);
    }

    #[test]
    fn schedule_validation() {
        assert!(LearningRateSchedule::new(vec![]).is_err());
        assert!(LearningRateSchedule::new(vec![0.1, -0.1]).is_err());
        assert!(LearningRateSchedule::new(vec![f64::NAN]).is_err());
        let s = LearningRateSchedule::global(0.2, 3).unwrap();
        assert_eq!(s.len(), 4);
        assert_eq!(s.as_global(), Some(0.2));
        assert_eq!(LearningRateSchedule::new(vec![0.1, 0.2]).unwrap().as_global(), None);
    }

    #[test]
    fn delta_z_trivial_cases() {
        let s = random_state(&[4, 6, 6, 1], 8);
        let x = [0.4, -0.3, 1.1, 0.9];
        let y = [0.7];
        let zero = LearningRateSchedule::global(0.0, 2).unwrap();
        for layer in 1..=2 {
            assert!(delta_z_actual(&s, &x, &y, &zero, layer).unwrap().values.iter().all(|&v| v == 0.0));
        }
        let sched = LearningRateSchedule::global(0.5, 2).unwrap();
        let dz = delta_z_actual(&s, &[0.0; 4], &y, &sched, 2).unwrap();
        assert!(dz.values.iter().all(|&v| v == 0.0));
        let t = forward(&s, &[0.0; 4]).unwrap();
        let lin = delta_z_linearized(&s, &t, &y, &sched, 2).unwrap();
        assert!(lin.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linearized_delta_is_exactly_linear_in_a_global_rate() {
        let s = random_state(&[5, 7, 7, 7, 1], 9);
        let x = [0.3, 1.0, -0.6, 0.2, -1.4];
        let t = forward(&s, &x).unwrap();
        let unit = delta_z_linearized(&s, &t, &[1.2], &LearningRateSchedule::global(1.0, 3).unwrap(), 3).unwrap();
        for eta in [0.37, 1e-3, 12.5] {
            let d = delta_z_linearized(&s, &t, &[1.2], &LearningRateSchedule::global(eta, 3).unwrap(), 3).unwrap();
            for (a, b) in d.values.iter().zip(&unit.values) {
                assert_eq!(*a, eta * b);
            }
        }
    }

    #[test]
    fn linearized_delta_vanishes_at_the_target() {
        let s = random_state(&[3, 4, 4, 1], 10);
        let t = forward(&s, &[1.0, 0.5, -2.0]).unwrap();
        let y = t.output().to_vec();
        let d = delta_z_linearized(&s, &t, &y, &LearningRateSchedule::global(0.7, 2).unwrap(), 2).unwrap();
        assert!(d.values.iter().all(|&v| v == 0.0));
    }
}
