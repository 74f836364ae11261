//! Moment recursions for `B, B̃, C, C̃`, their calibration, power-law fits and
//! the maximal-update learning rate.
//!
//! With `n_p = n_{ℓ-1}`, `n = n_ℓ`, `η = η_ℓ`, `x₄ = ‖x‖⁴/n_0²` and every
//! order-of-magnitude source term replaced by `κ · (its scale)`:
//!
//! ```text
//! B^(ℓ)    = κ_B  η² n_p²/(n_L n) x₄ + (η n_p/n) C + B̃/n + (1 + 1/n) B
//! B̃^(ℓ)/n = κ_B̃ η² n_p²/(n_L n) x₄ + (η n_p/n) C + B̃/n + 2B/n²
//! C^(ℓ)    = κ_C  η n_p/n_L x₄ + C + C̃/n
//! C̃^(ℓ)    = κ_C̃ η n_p/(n n_L) x₄ + C/n + (1 + 1/n) C̃
//! ```
//!
//! where the right-hand sides use the layer `ℓ-1` values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::LearningRateSchedule;
use crate::observables::{Observable, ObservableEstimate};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecursionConstants {
    pub kappa_b: f64,
    pub kappa_btilde: f64,
    pub kappa_c: f64,
    pub kappa_ctilde: f64,
    /// `‖x‖⁴ / n_0²` (its expectation, for random inputs).
    pub x_norm4: f64,
}

impl RecursionConstants {
    pub fn uniform(kappa: f64, x_norm4: f64) -> Self {
        RecursionConstants {
            kappa_b: kappa,
            kappa_btilde: kappa,
            kappa_c: kappa,
            kappa_ctilde: kappa,
            x_norm4,
        }
    }

    fn validate(&self) -> Result<()> {
        let all = [self.kappa_b, self.kappa_btilde, self.kappa_c, self.kappa_ctilde, self.x_norm4];
        if all.iter().all(|v| v.is_finite() && *v >= 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!("recursion constants must be finite and non-negative: {self:?}")))
        }
    }
}

/// `E‖x‖⁴ / n_0²` for `x ~ N(0, I_{n_0})`.
pub fn gaussian_x_norm4(n0: usize) -> f64 {
    1.0 + 2.0 / n0 as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RecursionState {
    pub ell: usize,
    pub b: f64,
    pub btilde: f64,
    pub c: f64,
    pub ctilde: f64,
}

/// Layer `ℓ` widths the recursion needs: `(n_{ℓ-1}, n_ℓ, n_L)`.
fn layer_widths(widths: &[usize], ell: usize) -> Result<(f64, f64, f64)> {
    if widths.len() < 3 {
        return Err(Error::Config("widths must include input, one hidden layer and output".into()));
    }
    let depth = widths.len() - 2;
    if ell == 0 || ell > depth {
        return Err(Error::Layer { layer: ell, max: depth });
    }
    Ok((widths[ell - 1] as f64, widths[ell] as f64, widths[depth] as f64))
}

pub fn recursion_step(
    prev: &RecursionState,
    widths: &[usize],
    schedule: &LearningRateSchedule,
    constants: &RecursionConstants,
) -> Result<RecursionState> {
    let ell = prev.ell + 1;
    let (np, n, nl) = layer_widths(widths, ell)?;
    let eta = schedule.rate(ell);
    let x4 = constants.x_norm4;
    let quad = eta * eta * np * np / (nl * n) * x4;
    let lin = eta * np / nl * x4;

    let b = constants.kappa_b * quad + eta * np / n * prev.c + prev.btilde / n + (1.0 + 1.0 / n) * prev.b;
    let btilde_over_n =
        constants.kappa_btilde * quad + eta * np / n * prev.c + prev.btilde / n + 2.0 * prev.b / (n * n);
    let c = constants.kappa_c * lin + prev.c + prev.ctilde / n;
    let ctilde = constants.kappa_ctilde * lin / n + prev.c / n + (1.0 + 1.0 / n) * prev.ctilde;
    Ok(RecursionState {
        ell,
        b,
        btilde: btilde_over_n * n,
        c,
        ctilde,
    })
}

/// States for `ℓ = 1..=depth`, iterated from the zero state.
pub fn evolve_recursion(
    depth: usize,
    widths: &[usize],
    schedule: &LearningRateSchedule,
    constants: &RecursionConstants,
) -> Result<Vec<RecursionState>> {
    constants.validate()?;
    if depth + 2 > widths.len() {
        return Err(Error::Layer {
            layer: depth,
            max: widths.len().saturating_sub(2),
        });
    }
    if schedule.len() < depth {
        return Err(Error::Config(format!(
            "schedule covers {} layers, recursion needs {depth}",
            schedule.len()
        )));
    }
    let mut out = Vec::with_capacity(depth);
    let mut s = RecursionState::default();
    for _ in 0..depth {
        s = recursion_step(&s, widths, schedule, constants)?;
        out.push(s);
    }
    Ok(out)
}

fn layer_one_mean(estimates: &[ObservableEstimate], which: Observable) -> Result<f64> {
    let e = estimates
        .iter()
        .find(|e| e.layer == 1 && e.observable == which)
        .ok_or_else(|| Error::Calibration(format!("no layer-1 estimate of {which}")))?;
    if !(e.mean.is_finite() && e.mean > 0.0) {
        return Err(Error::Calibration(format!(
            "layer-1 estimate of {} is {}, need a positive finite value",
            e.observable, e.mean
        )));
    }
    Ok(e.mean)
}

/// Inverts the layer-1 source terms, where every recursive term vanishes.
///
/// Needs layer-1 means of `BGram`, `Btilde`, `C` and `Ctilde`.
pub fn calibrate_constants(
    estimates: &[ObservableEstimate],
    widths: &[usize],
    schedule: &LearningRateSchedule,
    x_norm4: f64,
) -> Result<RecursionConstants> {
    let (n0, n1, nl) = layer_widths(widths, 1)?;
    let eta = schedule.rate(1);
    if !(eta > 0.0) {
        return Err(Error::Calibration("layer-1 rate must be positive".into()));
    }
    let quad = eta * eta * n0 * n0 / (nl * n1) * x_norm4;
    let lin = eta * n0 / nl * x_norm4;
    let b = layer_one_mean(estimates, Observable::BGram)?;
    let bt = layer_one_mean(estimates, Observable::Btilde)?;
    let c = layer_one_mean(estimates, Observable::C)?;
    let ct = layer_one_mean(estimates, Observable::Ctilde)?;
    let k = RecursionConstants {
        kappa_b: b / quad,
        kappa_btilde: bt / n1 / quad,
        kappa_c: c / lin,
        kappa_ctilde: ct * n1 / lin,
        x_norm4,
    };
    k.validate().map_err(|e| Error::Calibration(e.to_string()))?;
    Ok(k)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub exponent: f64,
    pub log_prefactor: f64,
    pub r_squared: f64,
    pub points_used: usize,
}

impl PowerLawFit {
    pub fn predict(&self, x: f64) -> f64 {
        (self.log_prefactor + self.exponent * x.ln()).exp()
    }
}

/// Least squares on `(ln x, ln y)`.
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<PowerLawFit> {
    if points.len() < 3 {
        return Err(Error::Fit(format!("need at least 3 points, got {}", points.len())));
    }
    if let Some(p) = points
        .iter()
        .find(|(x, y)| !(x.is_finite() && y.is_finite() && *x > 0.0 && *y > 0.0))
    {
        return Err(Error::Fit(format!("point ({}, {}) is not positive and finite", p.0, p.1)));
    }
    let k = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / k;
    let my = ly.iter().sum::<f64>() / k;
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ly.iter().map(|y| (y - my) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::Fit("all abscissae are equal".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = lx
        .iter()
        .zip(&ly)
        .map(|(x, y)| {
            let r = y - (intercept + slope * x);
            r * r
        })
        .sum();
    let r_squared = if syy == 0.0 { 1.0 } else { (1.0 - ss_res / syy).clamp(0.0, 1.0) };
    Ok(PowerLawFit {
        exponent: slope,
        log_prefactor: intercept,
        r_squared,
        points_used: points.len(),
    })
}

/// `c₂ η² ℓ³`.
pub fn predict_delta_sq(ell: usize, eta: f64, c2: f64) -> f64 {
    c2 * eta * eta * (ell as f64).powi(3)
}

/// `η* = mean^{-1/2}` from the unit-rate linearized mean of `(Δz)²`, which
/// scales exactly as `η²`.
pub fn solve_eta_star(estimate_at_unit_rate: &ObservableEstimate) -> Result<f64> {
    let m = estimate_at_unit_rate.mean;
    if !(m.is_finite() && m > 0.0) {
        return Err(Error::Solve(format!("unit-rate mean must be positive, got {m}")));
    }
    Ok(m.powf(-0.5))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Refinement {
    pub eta_star: f64,
    pub iterations: usize,
    /// Every `(η, estimated mean)` evaluated, in evaluation order.
    pub evaluations: Vec<(f64, f64)>,
}

/// Bisects `mean(η) = target` on `[η₀/4, 4η₀]` in `log η`.
///
/// `mean` should use common random numbers across calls; the bracket values
/// and every evaluation are checked for monotonicity in `η`.
pub fn refine_eta_star<F>(eta0: f64, target: f64, rel_tol: f64, mut mean: F) -> Result<Refinement>
where
    F: FnMut(f64) -> Result<f64>,
{
    if !(eta0 > 0.0 && eta0.is_finite()) {
        return Err(Error::Solve(format!("initial rate must be positive, got {eta0}")));
    }
    let mut evaluations = Vec::new();
    let mut eval = |eta: f64, evaluations: &mut Vec<(f64, f64)>| -> Result<f64> {
        let v = mean(eta)?;
        if !v.is_finite() {
            return Err(Error::Solve(format!("non-finite mean at η = {eta}")));
        }
        evaluations.push((eta, v));
        Ok(v)
    };
    let (mut lo, mut hi) = (eta0 / 4.0, eta0 * 4.0);
    let f_lo = eval(lo, &mut evaluations)?;
    let f_hi = eval(hi, &mut evaluations)?;
    if !(f_lo < target && target < f_hi) {
        return Err(Error::Solve(format!(
            "target {target} not bracketed: mean({lo}) = {f_lo}, mean({hi}) = {f_hi}"
        )));
    }
    let mut iterations = 0;
    while hi / lo > 1.0 + rel_tol && iterations < 200 {
        let mid = (lo * hi).sqrt();
        let f = eval(mid, &mut evaluations)?;
        if f < target {
            lo = mid;
        } else {
            hi = mid;
        }
        iterations += 1;
    }
    let mut sorted = evaluations.clone();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    if sorted.windows(2).any(|w| w[1].1 < w[0].1) {
        return Err(Error::Solve("mean is not monotone in η over the bracket".into()));
    }
    Ok(Refinement {
        eta_star: (lo * hi).sqrt(),
        iterations,
        evaluations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn est(observable: Observable, mean: f64) -> ObservableEstimate {
        ObservableEstimate {
            observable,
            layer: 1,
            mean,
            stderr: 0.0,
            replicates: 2,
        }
    }

    #[test]
    fn zero_is_a_fixed_point() {
        let w = vec![4; 7];
        let s = evolve_recursion(5, &w, &LearningRateSchedule::global(0.0, 5).unwrap(), &RecursionConstants::uniform(0.0, 1.0))
            .unwrap();
        assert!(s.iter().all(|r| r.b == 0.0 && r.btilde == 0.0 && r.c == 0.0 && r.ctilde == 0.0));
    }

    #[test]
    fn first_step_is_the_pure_source() {
        let w = [3, 5, 7, 1];
        let sched = LearningRateSchedule::new(vec![0.3, 0.2, 0.1]).unwrap();
        let k = RecursionConstants {
            kappa_b: 1.5,
            kappa_btilde: 0.7,
            kappa_c: 2.0,
            kappa_ctilde: 0.4,
            x_norm4: 1.2,
        };
        let s = evolve_recursion(1, &w, &sched, &k).unwrap()[0];
        let expected_b = 1.5 * 0.09 * 9.0 / (7.0 * 5.0) * 1.2;
        assert!((s.b - expected_b).abs() < 1e-15);
        assert!((s.c - 2.0 * 0.3 * 3.0 / 7.0 * 1.2).abs() < 1e-15);
    }

    #[test]
    fn leading_order_cubic_limit() {
        let n = 1_000_000;
        let k = RecursionConstants::uniform(1.0, 1.0);
        let ratio = |l: usize| {
            let w = vec![n; l + 1].into_iter().chain([1]).collect::<Vec<_>>();
            let s = evolve_recursion(l, &w, &LearningRateSchedule::global(0.01, l).unwrap(), &k).unwrap();
            s[l - 1].b / (1e-4 * (l as f64).powi(3))
        };
        let (a, b) = (ratio(64), ratio(128));
        assert!(a > 0.0 && (a / b - 1.0).abs() < 0.15, "{a} {b}");
        assert!((b - 1.0 / 6.0).abs() < 0.05, "{b}");
    }

    #[test]
    fn calibration_recovers_known_constants() {
        let w = [6, 9, 9, 9, 1];
        let sched = LearningRateSchedule::global(0.37, 4).unwrap();
        let k = RecursionConstants {
            kappa_b: 1.3,
            kappa_btilde: 0.11,
            kappa_c: 0.9,
            kappa_ctilde: 1.7,
            x_norm4: gaussian_x_norm4(6),
        };
        let s = evolve_recursion(1, &w, &sched, &k).unwrap()[0];
        let ests = [
            est(Observable::BGram, s.b),
            est(Observable::Btilde, s.btilde),
            est(Observable::C, s.c),
            est(Observable::Ctilde, s.ctilde),
        ];
        let got = calibrate_constants(&ests, &w, &sched, k.x_norm4).unwrap();
        for (a, b) in [
            (got.kappa_b, k.kappa_b),
            (got.kappa_btilde, k.kappa_btilde),
            (got.kappa_c, k.kappa_c),
            (got.kappa_ctilde, k.kappa_ctilde),
        ] {
            assert!((a - b).abs() <= 1e-12 * b, "{a} vs {b}");
        }
    }

    #[test]
    fn calibration_rejects_zero_estimates() {
        let w = [4, 4, 4, 1];
        let sched = LearningRateSchedule::global(0.0, 3).unwrap();
        let ests = [
            est(Observable::BGram, 0.0),
            est(Observable::Btilde, 0.0),
            est(Observable::C, 0.0),
            est(Observable::Ctilde, 0.0),
        ];
        assert!(matches!(
            calibrate_constants(&ests, &w, &sched, 1.0),
            Err(Error::Calibration(_))
        ));
        let sched = LearningRateSchedule::global(1.0, 3).unwrap();
        assert!(calibrate_constants(&ests, &w, &sched, 1.0).is_err());
    }

    #[test]
    fn fit_examples() {
        let cubic: Vec<_> = (4..=32).map(|l| (l as f64, 2.0 * (l as f64).powi(3))).collect();
        let f = fit_power_law(&cubic).unwrap();
        assert!((f.exponent - 3.0).abs() < 1e-12 && (f.r_squared - 1.0).abs() < 1e-12);
        assert!((f.log_prefactor - 2f64.ln()).abs() < 1e-10);
        let mixed: Vec<_> = (8..=64).map(|l| (l as f64, (l as f64).powi(3) + (l as f64).powi(2))).collect();
        let g = fit_power_law(&mixed).unwrap().exponent;
        assert!((2.9..=3.1).contains(&g), "{g}");
        let inv: Vec<_> = [8.0f64, 16.0, 32.0, 64.0].iter().map(|&l| (l, l.powf(-1.5))).collect();
        assert!((fit_power_law(&inv).unwrap().exponent + 1.5).abs() < 1e-12);
        assert!(fit_power_law(&[(1.0, 1.0), (2.0, 0.0), (3.0, 1.0)]).is_err());
        assert!(fit_power_law(&[(1.0, 1.0), (2.0, 2.0)]).is_err());
    }

    #[test]
    fn predictor_and_solver_examples() {
        assert_eq!(predict_delta_sq(5, 0.0, 3.0), 0.0);
        assert_eq!(predict_delta_sq(2, 1.0, 1.0), 8.0);
        assert_eq!(predict_delta_sq(6, 0.3, 2.0) * 8.0, predict_delta_sq(12, 0.3, 2.0));
        let e = |m| est(Observable::DeltaZSq(crate::net::UpdateMode::Linearized), m);
        assert_eq!(solve_eta_star(&e(1.0)).unwrap(), 1.0);
        assert_eq!(solve_eta_star(&e(4.0)).unwrap(), 0.5);
        assert!(solve_eta_star(&e(0.0)).is_err());
    }

    #[test]
    fn refinement_finds_the_root_of_a_quadratic() {
        let r = refine_eta_star(1.0, 1.0, 1e-10, |eta| Ok(2.5 * eta * eta)).unwrap();
        assert!((r.eta_star - 2.5f64.powf(-0.5)).abs() < 1e-9);
        assert!(refine_eta_star(1.0, 1.0, 1e-6, |_| Ok(1.0)).is_err());
        let bumpy = |eta: f64| Ok(eta * eta * if (0.7..0.9).contains(&eta) { 0.1 } else { 1.0 });
        assert!(refine_eta_star(1.0, 1.0, 1e-6, bumpy).is_err());
    }
}
