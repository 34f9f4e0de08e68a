//! Cosine-similarity goodness and the layer-local objectives built on it.

use ndarray::{ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::prototype::{PrototypeSet, RegressionPrototypePair};

/// Norm floor below which a layer output counts as the zero vector.
pub const NORM_FLOOR: f64 = 1e-12;

/// Cosine similarity between a layer output and a unit prototype.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct GoodnessScore(f64);

impl GoodnessScore {
    pub fn value(self) -> f64 {
        self.0
    }
}

/// `prototype . z / ||z||`; zero when `z` is the zero vector.
pub fn goodness(z: ArrayView1<'_, f64>, prototype: ArrayView1<'_, f64>) -> Result<GoodnessScore> {
    check_dim(prototype.len(), z.len(), "layer output vs prototype")?;
    let norm = z.dot(&z).sqrt();
    if norm < NORM_FLOOR {
        return Ok(GoodnessScore(0.0));
    }
    Ok(GoodnessScore(prototype.dot(&z) / norm))
}

/// Class-wise goodness of one layer output against every prototype of `set`.
/// Panics on a dimension mismatch; this is the hot path.
pub fn class_goodness(z: ArrayView1<'_, f64>, set: &PrototypeSet, out: &mut [f64]) {
    assert_eq!(z.len(), set.dim(), "layer output vs prototype dimension");
    assert_eq!(out.len(), set.num_classes());
    let norm = z.dot(&z).sqrt();
    if norm < NORM_FLOOR {
        out.fill(0.0);
        return;
    }
    let scores = z.dot(set.vectors());
    for (o, s) in out.iter_mut().zip(scores.iter()) {
        *o = s / norm;
    }
}

/// Regression goodness: cosine similarity with the upper-bound prototype.
pub fn regression_goodness(z: ArrayView1<'_, f64>, pair: &RegressionPrototypePair) -> f64 {
    assert_eq!(z.len(), pair.dim(), "layer output vs prototype dimension");
    let norm = z.dot(&z).sqrt();
    if norm < NORM_FLOOR {
        0.0
    } else {
        pair.upper.dot(&z) / norm
    }
}

/// Hinge loss `sum_{k != true} max(0, G_k - G_true + q)`.
pub fn margin_loss(goodnesses: &[f64], true_class: usize, margin: f64) -> f64 {
    debug_assert!(goodnesses.len() >= 2 && true_class < goodnesses.len());
    let g_true = goodnesses[true_class];
    goodnesses
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != true_class)
        .map(|(_, g)| (g - g_true + margin).max(0.0))
        .sum()
}

/// `alpha * G_true - sum_{k != true} G_k` (to be maximized).
pub fn alpha_objective(goodnesses: &[f64], true_class: usize, alpha: f64) -> f64 {
    debug_assert!(goodnesses.len() >= 2 && true_class < goodnesses.len());
    let others: f64 = goodnesses
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != true_class)
        .map(|(_, g)| g)
        .sum();
    alpha * goodnesses[true_class] - others
}

/// `-(g - y)^2` (to be maximized); targets must be normalized to [-1, 1].
pub fn regression_objective(g: f64, target: f64) -> Result<f64> {
    if !(-1.0..=1.0).contains(&target) {
        return Err(Error::invalid(format!(
            "regression target {target} lies outside [-1, 1]"
        )));
    }
    Ok(-(g - target).powi(2))
}

/// Per-class scores accumulated over channels (`channels x classes` input).
pub fn channel_aggregate_classification(per_channel: ArrayView2<'_, f64>) -> Vec<f64> {
    per_channel.sum_axis(ndarray::Axis(0)).to_vec()
}

/// Mean of per-channel regression goodness.
pub fn channel_aggregate_regression(per_channel: &[f64]) -> Result<f64> {
    if per_channel.is_empty() {
        return Err(Error::invalid("no channel goodness values to average"));
    }
    Ok(per_channel.iter().sum::<f64>() / per_channel.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveMode {
    #[default]
    Margin,
    AlphaWeighted,
}

/// Layer objective for classification units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationObjectiveConfig {
    pub margin: f64,
    /// `None` means `N - 1`.
    pub alpha: Option<f64>,
    pub mode: ObjectiveMode,
}

impl Default for ClassificationObjectiveConfig {
    fn default() -> Self {
        Self {
            margin: 0.3,
            alpha: None,
            mode: ObjectiveMode::Margin,
        }
    }
}

impl ClassificationObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0) {
            return Err(Error::invalid(format!(
                "margin must be >= 0, got {}",
                self.margin
            )));
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0) {
                return Err(Error::invalid(format!("alpha must be > 0, got {a}")));
            }
        }
        Ok(())
    }

    pub fn alpha_for(&self, num_classes: usize) -> f64 {
        self.alpha.unwrap_or(num_classes as f64 - 1.0)
    }

    /// Value to maximize for one sample.
    pub fn score(&self, goodnesses: &[f64], true_class: usize) -> f64 {
        match self.mode {
            ObjectiveMode::Margin => -margin_loss(goodnesses, true_class, self.margin),
            ObjectiveMode::AlphaWeighted => {
                alpha_objective(goodnesses, true_class, self.alpha_for(goodnesses.len()))
            }
        }
    }

    /// d(score)/d(goodness) for one sample, written into `out`.
    pub fn score_gradient(&self, goodnesses: &[f64], true_class: usize, out: &mut [f64]) {
        out.fill(0.0);
        match self.mode {
            ObjectiveMode::Margin => {
                let g_true = goodnesses[true_class];
                for (k, g) in goodnesses.iter().enumerate() {
                    if k != true_class && g - g_true + self.margin > 0.0 {
                        out[k] -= 1.0;
                        out[true_class] += 1.0;
                    }
                }
            }
            ObjectiveMode::AlphaWeighted => {
                out.fill(-1.0);
                out[true_class] = self.alpha_for(goodnesses.len());
            }
        }
    }
}

/// What a training unit's output is scored against.
#[derive(Clone, Copy, Debug)]
pub enum UnitTarget<'a> {
    Classification {
        labels: &'a [usize],
        prototypes: &'a PrototypeSet,
        objective: &'a ClassificationObjectiveConfig,
    },
    Regression {
        targets: &'a [f64],
        prototypes: &'a RegressionPrototypePair,
    },
}

impl UnitTarget<'_> {
    pub fn len(&self) -> usize {
        match self {
            UnitTarget::Classification { labels, .. } => labels.len(),
            UnitTarget::Regression { targets, .. } => targets.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tap_dim(&self) -> usize {
        match self {
            UnitTarget::Classification { prototypes, .. } => prototypes.dim(),
            UnitTarget::Regression { prototypes, .. } => prototypes.dim(),
        }
    }

    /// Batch-mean objective of a `batch x dim` tap matrix, rows aligned with
    /// the targets.
    pub fn batch_objective(&self, tap: ArrayView2<'_, f64>) -> f64 {
        assert_eq!(tap.nrows(), self.len(), "tap rows vs targets");
        let total: f64 = match *self {
            UnitTarget::Classification {
                labels,
                prototypes,
                objective,
            } => {
                let mut g = vec![0.0; prototypes.num_classes()];
                tap.rows()
                    .into_iter()
                    .zip(labels)
                    .map(|(z, &y)| {
                        class_goodness(z, prototypes, &mut g);
                        objective.score(&g, y)
                    })
                    .sum()
            }
            UnitTarget::Regression {
                targets,
                prototypes,
            } => tap
                .rows()
                .into_iter()
                .zip(targets)
                .map(|(z, &y)| -(regression_goodness(z, prototypes) - y).powi(2))
                .sum(),
        };
        total / tap.nrows() as f64
    }

    /// Gradient of [`UnitTarget::batch_objective`] with respect to the tap
    /// matrix.
    pub fn batch_objective_gradient(&self, tap: ArrayView2<'_, f64>) -> ndarray::Array2<f64> {
        let b = tap.nrows() as f64;
        let mut grad = ndarray::Array2::<f64>::zeros(tap.raw_dim());
        for (i, z) in tap.rows().into_iter().enumerate() {
            let norm = z.dot(&z).sqrt();
            if norm < NORM_FLOOR {
                continue;
            }
            let mut gz = grad.row_mut(i);
            match *self {
                UnitTarget::Classification {
                    labels,
                    prototypes,
                    objective,
                } => {
                    let c = prototypes.num_classes();
                    let mut g = vec![0.0; c];
                    let mut dg = vec![0.0; c];
                    class_goodness(z, prototypes, &mut g);
                    objective.score_gradient(&g, labels[i], &mut dg);
                    // dG_k/dz = (p_k - G_k z/|z|) / |z|
                    for k in 0..c {
                        if dg[k] == 0.0 {
                            continue;
                        }
                        let w = dg[k] / (b * norm);
                        gz.scaled_add(w, &prototypes.prototype(k));
                        gz.scaled_add(-w * g[k] / norm, &z);
                    }
                }
                UnitTarget::Regression {
                    targets,
                    prototypes,
                } => {
                    let g = prototypes.upper.dot(&z) / norm;
                    let w = -2.0 * (g - targets[i]) / (b * norm);
                    gz.scaled_add(w, &prototypes.upper);
                    gz.scaled_add(-w * g / norm, &z);
                }
            }
        }
        grad
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array2};

    #[test]
    fn goodness_examples() {
        let p = array![0.6, 0.8, 0.0];
        assert_abs_diff_eq!(
            goodness(p.view(), p.view()).unwrap().value(),
            1.0,
            epsilon = 1e-15
        );
        let neg = p.mapv(|v| -3.0 * v);
        assert_abs_diff_eq!(
            goodness(neg.view(), p.view()).unwrap().value(),
            -1.0,
            epsilon = 1e-15
        );
        let orth = array![0.8, -0.6, 0.0];
        assert_abs_diff_eq!(
            goodness(orth.view(), p.view()).unwrap().value(),
            0.0,
            epsilon = 1e-15
        );
        let zero = array![0.0, 0.0, 0.0];
        assert_eq!(goodness(zero.view(), p.view()).unwrap().value(), 0.0);
        assert!(goodness(array![1.0, 0.0].view(), p.view()).is_err());
    }

    #[test]
    fn margin_loss_examples() {
        assert_abs_diff_eq!(margin_loss(&[0.9, 0.1, 0.1], 0, 0.3), 0.0);
        assert_abs_diff_eq!(margin_loss(&[0.5, 0.5], 0, 0.3), 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(margin_loss(&[0.0, 0.4, 0.6], 0, 0.3), 1.6, epsilon = 1e-15);
    }

    #[test]
    fn alpha_objective_examples() {
        assert_abs_diff_eq!(
            alpha_objective(&[1.0, -0.5, -0.5], 0, 2.0),
            3.0,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            alpha_objective(&[0.3, 0.3, 0.3], 1, 2.0),
            0.0,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(alpha_objective(&[0.2, 0.8], 1, 1.0), 0.6, epsilon = 1e-15);
    }

    #[test]
    fn regression_objective_examples() {
        assert_eq!(regression_objective(0.4, 0.4).unwrap(), 0.0);
        assert_abs_diff_eq!(regression_objective(1.0, -1.0).unwrap(), -4.0);
        assert_abs_diff_eq!(
            regression_objective(0.25, 0.5).unwrap(),
            -0.0625,
            epsilon = 1e-15
        );
        assert!(regression_objective(0.0, 1.5).is_err());
    }

    #[test]
    fn channel_aggregation_examples() {
        let single = array![[0.1, 0.2, 0.3]];
        assert_eq!(
            channel_aggregate_classification(single.view()),
            vec![0.1, 0.2, 0.3]
        );
        let eye = array![[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(channel_aggregate_classification(eye.view()), vec![1.0, 1.0]);
        let rows = array![[0.2, 0.5], [0.4, 0.1]];
        let agg = channel_aggregate_classification(rows.view());
        assert_abs_diff_eq!(agg[0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(agg[1], 0.6, epsilon = 1e-15);

        assert_eq!(channel_aggregate_regression(&[0.7]).unwrap(), 0.7);
        assert_eq!(channel_aggregate_regression(&[1.0, -1.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(
            channel_aggregate_regression(&[0.1, 0.2, 0.6]).unwrap(),
            0.3,
            epsilon = 1e-15
        );
        assert!(channel_aggregate_regression(&[]).is_err());
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let protos = PrototypeSet::random(3, 4, &mut crate::rng::seeded(2)).unwrap();
        let labels = [0usize, 2, 1];
        let tap = array![
            [0.3, -0.2, 0.5, 0.1],
            [1.0, 0.4, -0.3, 0.2],
            [-0.1, 0.2, 0.9, -0.7]
        ];
        for mode in [ObjectiveMode::Margin, ObjectiveMode::AlphaWeighted] {
            let cfg = ClassificationObjectiveConfig {
                mode,
                ..Default::default()
            };
            let target = UnitTarget::Classification {
                labels: &labels,
                prototypes: &protos,
                objective: &cfg,
            };
            check_fd(&target, &tap);
        }
        let pair = crate::prototype::regression_prototypes(4, &mut crate::rng::seeded(3)).unwrap();
        let ys = [0.2, -0.7, 0.9];
        check_fd(
            &UnitTarget::Regression {
                targets: &ys,
                prototypes: &pair,
            },
            &tap,
        );
    }

    fn check_fd(target: &UnitTarget<'_>, tap: &Array2<f64>) {
        let grad = target.batch_objective_gradient(tap.view());
        let h = 1e-6;
        for i in 0..tap.nrows() {
            for j in 0..tap.ncols() {
                let mut plus = tap.clone();
                plus[[i, j]] += h;
                let mut minus = tap.clone();
                minus[[i, j]] -= h;
                let fd = (target.batch_objective(plus.view())
                    - target.batch_objective(minus.view()))
                    / (2.0 * h);
                assert_abs_diff_eq!(grad[[i, j]], fd, epsilon = 1e-7);
            }
        }
    }
}
