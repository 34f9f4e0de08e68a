//! Zeroth-order gradient estimation from central-difference directional
//! derivatives.
//!
//! For a direction `v ~ N(0, I)` with unit version `u = v / |v|`,
//!
//! ```text
//! D_v G(w) = [G(w + eps u) - G(w - eps u)] / (2 eps)
//! ```
//!
//! and `n D_v G(w) u` is an unbiased estimate of `dG/dw` because
//! `E[u u^T] = I / n`. Averaging `P` such estimates costs `2P` objective
//! evaluations regardless of `n`.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::exec::Execution;

/// How perturbation directions are drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionSampling {
    /// Independent standard-normal directions.
    #[default]
    Gaussian,
    /// Gaussian directions orthogonalized against each other (Gram-Schmidt).
    /// Experimental; not part of the reference update rule.
    Orthogonal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DdConfig {
    pub epsilon: f64,
    pub directions: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub sampling: DirectionSampling,
}

impl Default for DdConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            directions: 1,
            learning_rate: 1e-3,
            sampling: DirectionSampling::Gaussian,
        }
    }
}

impl DdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        if self.directions == 0 {
            return Err(Error::invalid("at least one direction is required"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid(format!(
                "learning rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// The flat parameter vector of one training unit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterView(Vec<f64>);

impl ParameterView {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("a parameter view needs at least one value"));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite parameter {v}")));
        }
        Ok(Self(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// A read-only scalar objective over a candidate parameter vector.
///
/// Implementations must be deterministic and must not mutate shared state
/// they read from: [`estimate_gradient`] may call them concurrently.
pub trait Objective: Sync {
    fn evaluate(&self, params: &[f64]) -> f64;
}

impl<F> Objective for F
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    fn evaluate(&self, params: &[f64]) -> f64 {
        self(params)
    }
}

/// Wraps an objective and counts its evaluations.
pub struct CountingObjective<O> {
    inner: O,
    calls: AtomicU64,
}

impl<O: Objective> CountingObjective<O> {
    pub fn new(inner: O) -> Self {
        Self {
            inner,
            calls: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

impl<O: Objective> Objective for CountingObjective<O> {
    fn evaluate(&self, params: &[f64]) -> f64 {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.evaluate(params)
    }
}

fn perturbed(omega: &[f64], unit: &[f64], step: f64) -> Vec<f64> {
    omega.iter().zip(unit).map(|(w, u)| w + step * u).collect()
}

fn unit_direction(v: &[f64]) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::ZeroDirection);
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

fn finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteObjective(v))
    }
}

/// Central-difference directional derivative of `f` at `omega` along `v`.
pub fn directional_derivative<O: Objective + ?Sized>(
    f: &O,
    omega: &ParameterView,
    v: &[f64],
    epsilon: f64,
) -> Result<f64> {
    check_dim(omega.len(), v.len(), "direction vs parameters")?;
    if !(epsilon > 0.0) {
        return Err(Error::invalid(format!(
            "epsilon must be > 0, got {epsilon}"
        )));
    }
    let u = unit_direction(v)?;
    let plus = finite(f.evaluate(&perturbed(omega.as_slice(), &u, epsilon)))?;
    let minus = finite(f.evaluate(&perturbed(omega.as_slice(), &u, -epsilon)))?;
    Ok((plus - minus) / (2.0 * epsilon))
}

/// Draw `count` unit directions in `n` dimensions.
pub fn sample_directions<R: Rng + ?Sized>(
    n: usize,
    count: usize,
    sampling: DirectionSampling,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    let mut dirs = Vec::with_capacity(count);
    for _ in 0..count {
        let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        if sampling == DirectionSampling::Orthogonal && dirs.len() < n {
            for prev in &dirs {
                let prev: &Vec<f64> = prev;
                let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
                for (a, b) in v.iter_mut().zip(prev) {
                    *a -= dot * b;
                }
            }
        }
        dirs.push(unit_direction(&v)?);
    }
    Ok(dirs)
}

/// Result of one directional-derivative gradient estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct DdEstimate {
    pub gradient: Vec<f64>,
    /// Mean of all `2P` perturbed objective values, an `O(eps^2)` estimate
    /// of the objective at the unperturbed point obtained at no extra cost.
    pub objective: f64,
}

/// Gradient estimate `(n / P) sum_p D_{v_p} G(w) u_p`, using exactly `2P`
/// evaluations of `f`.
pub fn estimate_gradient<O, R>(
    f: &O,
    omega: &ParameterView,
    cfg: &DdConfig,
    rng: &mut R,
) -> Result<Vec<f64>>
where
    O: Objective + ?Sized,
    R: Rng + ?Sized,
{
    estimate_gradient_with(f, omega, cfg, rng, Execution::default()).map(|e| e.gradient)
}

/// [`estimate_gradient`] with an explicit execution policy. Directions are
/// drawn before the evaluations fan out, so the result does not depend on
/// the policy.
pub fn estimate_gradient_with<O, R>(
    f: &O,
    omega: &ParameterView,
    cfg: &DdConfig,
    rng: &mut R,
    exec: Execution,
) -> Result<DdEstimate>
where
    O: Objective + ?Sized,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    let n = omega.len();
    let dirs = sample_directions(n, cfg.directions, cfg.sampling, rng)?;
    let eps = cfg.epsilon;
    let values = exec.map(2 * dirs.len(), |k| {
        let sign = if k % 2 == 0 { eps } else { -eps };
        f.evaluate(&perturbed(omega.as_slice(), &dirs[k / 2], sign))
    });
    for &v in &values {
        finite(v)?;
    }
    let mut gradient = vec![0.0; n];
    let scale = n as f64 / dirs.len() as f64;
    for (p, u) in dirs.iter().enumerate() {
        let dd = (values[2 * p] - values[2 * p + 1]) / (2.0 * eps);
        for (g, ui) in gradient.iter_mut().zip(u) {
            *g += scale * dd * ui;
        }
    }
    let objective = values.iter().sum::<f64>() / values.len() as f64;
    Ok(DdEstimate {
        gradient,
        objective,
    })
}

/// Ascent step `w <- w + lambda * estimate`, returning the objective
/// estimate of [`DdEstimate`]. `omega` is left untouched when the estimate
/// fails.
pub fn dd_step<O, R>(f: &O, omega: &mut ParameterView, cfg: &DdConfig, rng: &mut R) -> Result<f64>
where
    O: Objective + ?Sized,
    R: Rng + ?Sized,
{
    dd_step_with(f, omega, cfg, rng, Execution::default())
}

pub fn dd_step_with<O, R>(
    f: &O,
    omega: &mut ParameterView,
    cfg: &DdConfig,
    rng: &mut R,
    exec: Execution,
) -> Result<f64>
where
    O: Objective + ?Sized,
    R: Rng + ?Sized,
{
    let est = estimate_gradient_with(f, omega, cfg, rng, exec)?;
    if cfg.learning_rate != 0.0 {
        for (w, g) in omega.0.iter_mut().zip(&est.gradient) {
            *w += cfg.learning_rate * g;
        }
    }
    Ok(est.objective)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use approx::assert_abs_diff_eq;

    fn view(v: Vec<f64>) -> ParameterView {
        ParameterView::new(v).unwrap()
    }

    #[test]
    fn linear_objective_is_exact() {
        let g = [0.5, -1.0, 2.0];
        let f = |w: &[f64]| w.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>();
        let v = [1.0, 2.0, -2.0];
        let expected = (0.5 * 1.0 - 2.0 - 4.0) / 3.0;
        for eps in [1e-1, 1e-3, 0.7] {
            let d = directional_derivative(&f, &view(vec![0.3, 0.1, -0.2]), &v, eps).unwrap();
            assert_abs_diff_eq!(d, expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn quadratic_objective_is_exact() {
        let a = [[2.0, 0.5, 0.0], [0.5, 1.0, -0.3], [0.0, -0.3, 3.0]];
        let f = |w: &[f64]| {
            let mut s = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    s += w[i] * a[i][j] * w[j];
                }
            }
            s
        };
        let w = [0.4, -1.2, 0.7];
        let v = [0.3, 0.9, -0.4];
        let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut expected = 0.0;
        for i in 0..3 {
            let grad_i: f64 = (0..3).map(|j| 2.0 * a[i][j] * w[j]).sum();
            expected += grad_i * v[i] / vn;
        }
        for eps in [1e-1, 1e-2, 1.0] {
            let d = directional_derivative(&f, &view(w.to_vec()), &v, eps).unwrap();
            assert_abs_diff_eq!(d, expected, epsilon = 1e-10);
        }
    }

    #[test]
    fn central_difference_is_second_order() {
        let f = |w: &[f64]| w[0].sin();
        let err = |eps: f64| {
            (directional_derivative(&f, &view(vec![0.0]), &[1.0], eps).unwrap() - 1.0).abs()
        };
        let ratio = err(1e-2) / err(5e-3);
        assert!((3.5..=4.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn rejects_bad_inputs() {
        let f = |w: &[f64]| w[0];
        assert!(matches!(
            directional_derivative(&f, &view(vec![1.0]), &[0.0], 1e-3),
            Err(Error::ZeroDirection)
        ));
        assert!(directional_derivative(&f, &view(vec![1.0]), &[1.0, 2.0], 1e-3).is_err());
        let nan = |_: &[f64]| f64::NAN;
        assert!(matches!(
            directional_derivative(&nan, &view(vec![1.0]), &[1.0], 1e-3),
            Err(Error::NonFiniteObjective(_))
        ));
        assert!(ParameterView::new(vec![]).is_err());
        assert!(ParameterView::new(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn one_dimensional_estimate_is_exact() {
        let f = |w: &[f64]| 3.0 * w[0] + 1.0;
        let mut rng = seeded(0);
        let cfg = DdConfig::default();
        for _ in 0..20 {
            let g = estimate_gradient(&f, &view(vec![0.2]), &cfg, &mut rng).unwrap();
            assert_abs_diff_eq!(g[0], 3.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn estimate_is_seeded_and_policy_independent() {
        let f = |w: &[f64]| w.iter().map(|x| x.sin()).sum::<f64>();
        let w = view((0..50).map(|i| i as f64 * 0.1).collect());
        let cfg = DdConfig {
            directions: 3,
            ..Default::default()
        };
        let a =
            estimate_gradient_with(&f, &w, &cfg, &mut seeded(7), Execution::Sequential).unwrap();
        let b = estimate_gradient_with(&f, &w, &cfg, &mut seeded(7), Execution::Parallel).unwrap();
        assert!((a.objective - w.as_slice().iter().map(|x| x.sin()).sum::<f64>()).abs() < 1e-4);
        assert_eq!(a, b);
    }

    #[test]
    fn evaluation_count_is_two_per_direction() {
        for p in [1, 2, 5] {
            let f = CountingObjective::new(|w: &[f64]| w.iter().sum::<f64>());
            let cfg = DdConfig {
                directions: p,
                ..Default::default()
            };
            estimate_gradient(&f, &view(vec![0.0; 10]), &cfg, &mut seeded(1)).unwrap();
            assert_eq!(f.calls(), 2 * p as u64);
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_untouched() {
        let f = |w: &[f64]| -w.iter().map(|x| x * x).sum::<f64>();
        let start: Vec<f64> = (0..8).map(|i| 0.1 * i as f64 - 0.3).collect();
        let mut w = view(start.clone());
        let cfg = DdConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        for _ in 0..10 {
            dd_step(&f, &mut w, &cfg, &mut seeded(2)).unwrap();
        }
        assert_eq!(w.as_slice(), start.as_slice());
    }

    #[test]
    fn ascent_shrinks_negative_norm_objective() {
        let f = |w: &[f64]| -w.iter().map(|x| x * x).sum::<f64>();
        let mut rng = seeded(4);
        let start: Vec<f64> = (0..10).map(|i| 1.0 - 0.2 * i as f64).collect();
        let n0 = start.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut w = view(start);
        let cfg = DdConfig {
            learning_rate: 0.05,
            directions: 4,
            ..Default::default()
        };
        for _ in 0..500 {
            dd_step(&f, &mut w, &cfg, &mut rng).unwrap();
        }
        let n1 = w.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(n1 < 0.1 * n0, "{n1} vs {n0}");
    }

    #[test]
    fn orthogonal_directions_are_orthonormal() {
        let dirs = sample_directions(6, 4, DirectionSampling::Orthogonal, &mut seeded(5)).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let d: f64 = dirs[i].iter().zip(&dirs[j]).map(|(a, b)| a * b).sum();
                assert_abs_diff_eq!(d, if i == j { 1.0 } else { 0.0 }, epsilon = 1e-12);
            }
        }
    }
}
