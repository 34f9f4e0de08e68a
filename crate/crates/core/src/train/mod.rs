//! The four training regimes.
//!
//! | regime  | objective                     | gradient source          |
//! |---------|-------------------------------|--------------------------|
//! | `ff_dd` | per-unit goodness objective   | directional derivatives  |
//! | `ff_ad` | per-unit goodness objective   | exact (dense units only) |
//! | `bp_dd` | global cross-entropy / MSE    | directional derivatives  |
//! | `bp_ad` | global cross-entropy / MSE    | exact (dense only)       |
//!
//! Layer-local regimes train units one after another in forward order;
//! every unit sees the full epoch budget, and units before it are frozen.

mod bp;
mod ff;

pub use bp::{train_bp_ad, train_bp_dd};
pub use ff::{assign_prototypes, train_ff, train_unit};

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetSplit, Targets};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::goodness::{ClassificationObjectiveConfig, ObjectiveMode};
use crate::inference::{evaluate, FfModel, Metric, TrainedModel};
use crate::nn::{init_parameters, ModelSpec, TaskKind};
use crate::rng::{stream, Stream};
use crate::zoo::{DdConfig, DirectionSampling};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    FfDd,
    FfAd,
    BpDd,
    BpAd,
}

impl Regime {
    pub const ALL: [Regime; 4] = [Regime::FfDd, Regime::FfAd, Regime::BpDd, Regime::BpAd];

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::FfDd => "ff_dd",
            Regime::FfAd => "ff_ad",
            Regime::BpDd => "bp_dd",
            Regime::BpAd => "bp_ad",
        }
    }

    pub fn is_layer_local(self) -> bool {
        matches!(self, Regime::FfDd | Regime::FfAd)
    }

    pub fn is_zeroth_order(self) -> bool {
        matches!(self, Regime::FfDd | Regime::BpDd)
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown regime `{s}`")))
    }
}

/// Hyperparameters of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub regime: Regime,
    pub learning_rate: f64,
    pub epsilon: f64,
    pub directions: usize,
    pub margin: f64,
    /// Weight of the true-class goodness in the alpha objective; `None`
    /// means `classes - 1`.
    pub alpha: Option<f64>,
    pub objective: ObjectiveMode,
    pub batch_size: usize,
    /// Epochs per training unit (layer-local) or in total (global).
    pub epochs: usize,
    pub seed: u64,
    #[serde(default)]
    pub sampling: DirectionSampling,
    #[serde(skip)]
    pub exec: Execution,
}

impl RunConfig {
    pub fn new(regime: Regime) -> Self {
        Self {
            regime,
            learning_rate: 1e-3,
            epsilon: 1e-3,
            directions: 1,
            margin: 0.3,
            alpha: None,
            objective: ObjectiveMode::Margin,
            batch_size: 256,
            epochs: 100,
            seed: 0,
            sampling: DirectionSampling::Gaussian,
            exec: Execution::default(),
        }
    }

    pub fn dd(&self) -> DdConfig {
        DdConfig {
            epsilon: self.epsilon,
            directions: self.directions,
            learning_rate: self.learning_rate,
            sampling: self.sampling,
        }
    }

    pub fn objective_config(&self) -> ClassificationObjectiveConfig {
        ClassificationObjectiveConfig {
            margin: self.margin,
            alpha: self.alpha,
            mode: self.objective,
        }
    }

    /// Check the hyperparameters and their compatibility with `spec`.
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be finite and >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if self.regime.is_zeroth_order() {
            self.dd().validate()?;
        }
        self.objective_config().validate()?;
        if matches!(self.regime, Regime::FfAd | Regime::BpAd) && !spec.is_dense_only() {
            return Err(Error::Unsupported(format!(
                "{} needs a dense-only model",
                self.regime
            )));
        }
        if self.regime.is_layer_local() {
            spec.validate_taps()
        } else {
            spec.validate()?;
            let out = spec.shapes()?.last().expect("non-empty").len();
            let want = match spec.task {
                TaskKind::Classification { classes } => classes,
                TaskKind::Regression => 1,
            };
            if out != want {
                return Err(Error::invalid(format!(
                    "{} needs a head of {want} outputs, model has {out}",
                    self.regime
                )));
            }
            Ok(())
        }
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub unit_id: String,
    /// Mean batch objective over the epoch (maximized; the negated loss for
    /// global regimes).
    pub objective: f64,
    /// Held-out accuracy or R², when measured.
    pub metric: Option<f64>,
    /// Cumulative objective evaluations.
    pub eval_count: u64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    /// Epochs each unit (or the global model) was trained for.
    pub epochs_per_unit: usize,
    /// Sum of epochs over all units, the total data passes spent.
    pub total_unit_epochs: usize,
    pub evaluations: u64,
}

impl TrainLog {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "epoch",
            "unit_id",
            "objective",
            "metric",
            "eval_count",
            "seconds",
        ])?;
        for r in &self.records {
            w.write_record([
                r.epoch.to_string(),
                r.unit_id.clone(),
                r.objective.to_string(),
                r.metric.map(|m| m.to_string()).unwrap_or_default(),
                r.eval_count.to_string(),
                format!("{:.6}", r.seconds),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<train log>", e))?;
        Ok(())
    }

    pub fn last_metric(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.metric)
    }
}

/// JSON manifest describing how a run was produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config: RunConfig,
    pub spec: ModelSpec,
    pub seed: u64,
    pub streams: Vec<(String, u64)>,
    pub epochs_per_unit: usize,
    pub total_unit_epochs: usize,
    pub evaluations: u64,
}

impl RunManifest {
    pub fn new(cfg: &RunConfig, spec: &ModelSpec, log: &TrainLog) -> Self {
        Self {
            version: concat!("ffzero ", env!("CARGO_PKG_VERSION")).to_string(),
            config: cfg.clone(),
            spec: spec.clone(),
            seed: cfg.seed,
            streams: [
                ("init", Stream::Init),
                ("prototypes", Stream::Prototypes),
                ("training", Stream::Training),
            ]
            .into_iter()
            .map(|(n, s)| (n.to_string(), s as u64))
            .collect(),
            epochs_per_unit: log.epochs_per_unit,
            total_unit_epochs: log.total_unit_epochs,
            evaluations: log.evaluations,
        }
    }
}

/// A finished run.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub trained: TrainedModel,
    pub log: TrainLog,
    pub metric: Metric,
    pub param_count: usize,
}

/// Initialize `spec` from the run seed, train it under `cfg.regime` and
/// score it on `test`.
pub fn run(
    spec: &ModelSpec,
    cfg: &RunConfig,
    train: &DatasetSplit,
    test: &DatasetSplit,
) -> Result<RunOutcome> {
    cfg.validate(spec)?;
    check_targets(spec, train)?;
    check_targets(spec, test)?;
    let model = init_parameters(spec, &mut stream(cfg.seed, Stream::Init))?;
    let param_count = model.param_count();
    let mut rng = stream(cfg.seed, Stream::Training);
    let (trained, log) = match cfg.regime {
        Regime::FfDd | Regime::FfAd => {
            let prototypes = assign_prototypes(spec, &mut stream(cfg.seed, Stream::Prototypes))?;
            let ff = FfModel::new(model, prototypes)?;
            let (ff, log) = train_ff(ff, train, cfg, Some(test), &mut rng)?;
            (TrainedModel::Ff(ff), log)
        }
        Regime::BpDd => {
            let (m, log) = train_bp_dd(model, train, cfg, Some(test), &mut rng)?;
            (TrainedModel::Global(m), log)
        }
        Regime::BpAd => {
            let (m, log) = train_bp_ad(model, train, cfg, Some(test), &mut rng)?;
            (TrainedModel::Global(m), log)
        }
    };
    let metric = evaluate(&trained, test, cfg.exec)?;
    Ok(RunOutcome {
        trained,
        log,
        metric,
        param_count,
    })
}

fn check_targets(spec: &ModelSpec, data: &DatasetSplit) -> Result<()> {
    match (spec.task, &data.targets) {
        (TaskKind::Classification { classes }, Targets::Classes { num_classes, .. })
            if *num_classes <= classes => {}
        (TaskKind::Regression, Targets::Values(_)) => {}
        _ => {
            return Err(Error::invalid(
                "dataset targets do not match the model task",
            ))
        }
    }
    crate::error::check_dim(
        spec.input.len(),
        data.inputs.ncols(),
        "dataset features vs model input",
    )
}

/// Batch `idx` of the targets.
pub(crate) enum BatchTargets {
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

impl BatchTargets {
    pub(crate) fn gather(targets: &Targets, idx: &[usize]) -> Self {
        match targets {
            Targets::Classes { labels, .. } => {
                BatchTargets::Classes(idx.iter().map(|&i| labels[i]).collect())
            }
            Targets::Values(v) => BatchTargets::Values(idx.iter().map(|&i| v[i]).collect()),
        }
    }
}

/// Shuffled mini-batches covering `0..n`; the last one may be short.
pub(crate) fn epoch_batches<R: rand::Rng + ?Sized>(
    n: usize,
    batch: usize,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    perm.chunks(batch).map(<[usize]>::to_vec).collect()
}

#[cfg(test)]
pub(crate) mod fixtures {
    use ndarray::Array2;
    use rand::Rng as _;
    use rand_distr::{Distribution, StandardNormal};

    use crate::data::{DatasetSplit, SplitTag, Targets};
    use crate::nn::TensorShape;
    use crate::rng::seeded;

    /// Gaussian blobs (std 0.3) around the first `classes` axes, scaled by 2.
    pub(crate) fn blobs(n: usize, classes: usize, dim: usize, seed: u64) -> DatasetSplit {
        let mut rng = seeded(seed);
        let mut x = Array2::zeros((n, dim));
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let y = i % classes;
            for j in 0..dim {
                let e: f64 = StandardNormal.sample(&mut rng);
                x[[i, j]] = 0.3 * e + if j == y { 2.0 } else { 0.0 };
            }
            labels.push(y);
        }
        DatasetSplit::new(
            x,
            TensorShape::flat(dim),
            Targets::Classes {
                labels,
                num_classes: classes,
            },
            SplitTag::Train,
        )
        .unwrap()
    }

    /// `y = tanh(x0 - x1)` on uniform inputs in `[-1, 1]^2`.
    pub(crate) fn smooth_regression(n: usize, seed: u64) -> DatasetSplit {
        let mut rng = seeded(seed);
        let x = Array2::from_shape_fn((n, 2), |_| rng.random_range(-1.0f64..1.0));
        let y = x.rows().into_iter().map(|r| (r[0] - r[1]).tanh()).collect();
        DatasetSplit::new(x, TensorShape::flat(2), Targets::Values(y), SplitTag::Train).unwrap()
    }
}
