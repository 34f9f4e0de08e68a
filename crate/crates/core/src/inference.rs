//! Prediction from trained models.
//!
//! A layer-locally trained classifier lets every trainable stage vote for
//! the class whose prototype its tap is most similar to, and returns the
//! most common vote. Goodness depends on the label only through the fixed
//! prototypes, so one forward pass yields every class score.

use std::io::Write;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::{DatasetSplit, Targets};
use crate::error::{check_dim, Error, Result};
use crate::exec::Execution;
use crate::goodness::{
    channel_aggregate_classification, channel_aggregate_regression, class_goodness,
    regression_goodness,
};
use crate::nn::{Forward, Model, TaskKind};
use crate::prototype::TapPrototypes;

/// Rows per forward chunk during batch prediction.
const CHUNK: usize = 256;

/// A model trained layer-locally together with the fixed targets of each of
/// its training units (unit order).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FfModel {
    pub model: Model,
    pub prototypes: Vec<TapPrototypes>,
}

impl FfModel {
    pub fn new(model: Model, prototypes: Vec<TapPrototypes>) -> Result<Self> {
        let dims = model.spec().unit_tap_dims();
        check_dim(
            dims.len(),
            prototypes.len(),
            "prototype sets vs training units",
        )?;
        for (d, p) in dims.iter().zip(&prototypes) {
            check_dim(*d, p.dim(), "prototype dimension vs tap")?;
            match (model.spec().task, p) {
                (TaskKind::Classification { classes }, TapPrototypes::Classification(s))
                    if s.num_classes() == classes => {}
                (TaskKind::Regression, TapPrototypes::Regression(_)) => {}
                _ => return Err(Error::invalid("prototype kind does not match the task")),
            }
        }
        Ok(Self { model, prototypes })
    }

    pub fn num_layers(&self) -> usize {
        self.model
            .spec()
            .stages
            .iter()
            .filter(|s| s.is_trainable())
            .count()
    }
}

/// A trained model of either family.
#[derive(Clone, Debug, PartialEq)]
pub enum TrainedModel {
    Ff(FfModel),
    /// Trained end to end on a global loss; the output is the prediction.
    Global(Model),
}

impl TrainedModel {
    pub fn model(&self) -> &Model {
        match self {
            TrainedModel::Ff(f) => &f.model,
            TrainedModel::Global(m) => m,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassPrediction {
    pub votes: Vec<usize>,
    pub class: usize,
    /// Class goodness of the last voting layer.
    pub last_goodness: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionPrediction {
    pub per_layer: Vec<f64>,
    pub value: f64,
}

/// Majority vote. Ties keep the last layer's vote when it is among the tied
/// classes, otherwise the tied class with the highest last-layer goodness.
pub fn resolve_votes(votes: &[usize], last_goodness: &[f64]) -> Result<usize> {
    let &last = votes.last().ok_or_else(|| Error::invalid("no votes"))?;
    let classes = votes
        .iter()
        .max()
        .map_or(0, |m| m + 1)
        .max(last_goodness.len());
    let mut counts = vec![0usize; classes];
    for &v in votes {
        counts[v] += 1;
    }
    let top = *counts.iter().max().expect("non-empty");
    let tied: Vec<usize> = (0..classes).filter(|&c| counts[c] == top).collect();
    if tied.len() == 1 {
        return Ok(tied[0]);
    }
    if tied.contains(&last) {
        return Ok(last);
    }
    let score = |c: usize| last_goodness.get(c).copied().unwrap_or(f64::NEG_INFINITY);
    Ok(tied
        .into_iter()
        .fold(None, |best: Option<usize>, c| match best {
            Some(b) if score(b) >= score(c) => Some(b),
            _ => Some(c),
        })
        .expect("tied set is non-empty"))
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Per-layer class goodness (`batch x classes` per layer) from taps.
fn layer_class_goodness(ff: &FfModel, fwd: &Forward, layers: usize) -> Result<Vec<Array2<f64>>> {
    let mut out = Vec::new();
    let mut unit = 0;
    for tap in fwd.taps.iter().take(layers) {
        let batch = tap.channels[0].nrows();
        let sets: Vec<_> = tap
            .channels
            .iter()
            .enumerate()
            .map(|(c, _)| match &ff.prototypes[unit + c] {
                TapPrototypes::Classification(s) => Ok(s),
                TapPrototypes::Regression(_) => {
                    Err(Error::invalid("regression prototypes on a classifier"))
                }
            })
            .collect::<Result<_>>()?;
        let classes = sets[0].num_classes();
        let mut g = Array2::zeros((batch, classes));
        let mut per_channel = Array2::zeros((tap.channels.len(), classes));
        let mut buf = vec![0.0; classes];
        for i in 0..batch {
            for (c, z) in tap.channels.iter().enumerate() {
                class_goodness(z.row(i), sets[c], &mut buf);
                per_channel
                    .row_mut(c)
                    .assign(&ndarray::ArrayView1::from(&buf));
            }
            let agg = if tap.channels.len() == 1 {
                per_channel.row(0).to_vec()
            } else {
                channel_aggregate_classification(per_channel.view())
            };
            g.row_mut(i).assign(&ndarray::ArrayView1::from(&agg));
        }
        unit += tap.channels.len();
        out.push(g);
    }
    Ok(out)
}

fn layer_regression_goodness(ff: &FfModel, fwd: &Forward, layers: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::new();
    let mut unit = 0;
    for tap in fwd.taps.iter().take(layers) {
        let batch = tap.channels[0].nrows();
        let mut values = Vec::with_capacity(batch);
        for i in 0..batch {
            let per: Vec<f64> = tap
                .channels
                .iter()
                .enumerate()
                .map(|(c, z)| match &ff.prototypes[unit + c] {
                    TapPrototypes::Regression(p) => Ok(regression_goodness(z.row(i), p)),
                    TapPrototypes::Classification(_) => {
                        Err(Error::invalid("class prototypes on a regressor"))
                    }
                })
                .collect::<Result<_>>()?;
            values.push(channel_aggregate_regression(&per)?);
        }
        unit += tap.channels.len();
        out.push(values);
    }
    Ok(out)
}

/// Batch predictor that counts forward passes (one per sample).
pub struct Predictor<'a> {
    ff: &'a FfModel,
    exec: Execution,
    passes: AtomicU64,
}

impl<'a> Predictor<'a> {
    pub fn new(ff: &'a FfModel, exec: Execution) -> Self {
        Self {
            ff,
            exec,
            passes: AtomicU64::new(0),
        }
    }

    pub fn forward_passes(&self) -> u64 {
        self.passes.load(Ordering::Relaxed)
    }

    fn chunked<T: Send>(
        &self,
        x: ArrayView2<'_, f64>,
        f: impl Fn(&Forward) -> Result<Vec<T>> + Sync + Send,
    ) -> Result<Vec<T>> {
        let model = &self.ff.model;
        let chunks = self.exec.map_chunks(x.nrows(), CHUNK, |r| {
            let fwd =
                model.forward_with_taps(x.slice(ndarray::s![r, ..]), Execution::Sequential)?;
            f(&fwd)
        });
        self.passes.fetch_add(x.nrows() as u64, Ordering::Relaxed);
        let mut out = Vec::with_capacity(x.nrows());
        for c in chunks {
            out.extend(c?);
        }
        Ok(out)
    }

    /// Classify every row of `x` using the votes of the first `layers`
    /// trainable stages (all of them when `None`).
    pub fn predict_class(
        &self,
        x: ArrayView2<'_, f64>,
        layers: Option<usize>,
    ) -> Result<Vec<ClassPrediction>> {
        if !matches!(self.ff.model.spec().task, TaskKind::Classification { .. }) {
            return Err(Error::invalid("model is not a classifier"));
        }
        let layers = layers.unwrap_or(usize::MAX).min(self.ff.num_layers());
        if layers == 0 {
            return Err(Error::invalid("no voting layers"));
        }
        self.chunked(x, |fwd| {
            let g = layer_class_goodness(self.ff, fwd, layers)?;
            (0..fwd.output.nrows())
                .map(|i| {
                    let votes: Vec<usize> = g
                        .iter()
                        .map(|gl| argmax(gl.row(i).as_slice().expect("row-major")))
                        .collect();
                    let last_goodness = g.last().expect("layers > 0").row(i).to_vec();
                    let class = resolve_votes(&votes, &last_goodness)?;
                    Ok(ClassPrediction {
                        votes,
                        class,
                        last_goodness,
                    })
                })
                .collect()
        })
    }

    /// Regression readout: the goodness of the last of the first `layers`
    /// trainable stages.
    pub fn predict_regression(
        &self,
        x: ArrayView2<'_, f64>,
        layers: Option<usize>,
    ) -> Result<Vec<RegressionPrediction>> {
        if self.ff.model.spec().task != TaskKind::Regression {
            return Err(Error::invalid("model is not a regressor"));
        }
        let layers = layers.unwrap_or(usize::MAX).min(self.ff.num_layers());
        if layers == 0 {
            return Err(Error::invalid("no readout layers"));
        }
        self.chunked(x, |fwd| {
            let g = layer_regression_goodness(self.ff, fwd, layers)?;
            Ok((0..fwd.output.nrows())
                .map(|i| {
                    let per_layer: Vec<f64> = g.iter().map(|l| l[i]).collect();
                    RegressionPrediction {
                        value: *per_layer.last().expect("layers > 0"),
                        per_layer,
                    }
                })
                .collect())
        })
    }
}

pub fn predict_class(
    ff: &FfModel,
    x: ArrayView2<'_, f64>,
    exec: Execution,
) -> Result<Vec<ClassPrediction>> {
    Predictor::new(ff, exec).predict_class(x, None)
}

pub fn predict_regression(
    ff: &FfModel,
    x: ArrayView2<'_, f64>,
    exec: Execution,
) -> Result<Vec<RegressionPrediction>> {
    Predictor::new(ff, exec).predict_regression(x, None)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Accuracy,
    R2,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub kind: MetricKind,
    pub value: f64,
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> Result<f64> {
    check_dim(labels.len(), pred.len(), "predictions vs labels")?;
    if labels.is_empty() {
        return Err(Error::invalid("empty evaluation set"));
    }
    let correct = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Coefficient of determination `1 - SS_res / SS_tot`.
pub fn r_squared(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_dim(target.len(), pred.len(), "predictions vs targets")?;
    if target.is_empty() {
        return Err(Error::invalid("empty evaluation set"));
    }
    let mean = target.iter().sum::<f64>() / target.len() as f64;
    let ss_tot: f64 = target.iter().map(|y| (y - mean).powi(2)).sum();
    let ss_res: f64 = pred.iter().zip(target).map(|(p, y)| (y - p).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::invalid("constant targets leave R^2 undefined"));
    }
    Ok(1.0 - ss_res / ss_tot)
}

/// Plain outputs of a globally trained model: argmax classes or the first
/// output column.
fn global_outputs(model: &Model, x: ArrayView2<'_, f64>, exec: Execution) -> Result<Array2<f64>> {
    let chunks = exec.map_chunks(x.nrows(), CHUNK, |r| {
        model.forward(x.slice(ndarray::s![r, ..]), Execution::Sequential)
    });
    let mut parts = Vec::with_capacity(chunks.len());
    for c in chunks {
        parts.push(c?);
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| Error::Format(e.to_string()))
}

/// Class predictions of any trained classifier.
pub fn classify(
    trained: &TrainedModel,
    x: ArrayView2<'_, f64>,
    exec: Execution,
) -> Result<Vec<usize>> {
    match trained {
        TrainedModel::Ff(ff) => Ok(predict_class(ff, x, exec)?
            .into_iter()
            .map(|p| p.class)
            .collect()),
        TrainedModel::Global(m) => Ok(global_outputs(m, x, exec)?
            .rows()
            .into_iter()
            .map(|r| argmax(&r.to_vec()))
            .collect()),
    }
}

/// Real-valued predictions of any trained regressor.
pub fn regress(
    trained: &TrainedModel,
    x: ArrayView2<'_, f64>,
    exec: Execution,
) -> Result<Vec<f64>> {
    match trained {
        TrainedModel::Ff(ff) => Ok(predict_regression(ff, x, exec)?
            .into_iter()
            .map(|p| p.value)
            .collect()),
        TrainedModel::Global(m) => Ok(global_outputs(m, x, exec)?.column(0).to_vec()),
    }
}

/// Accuracy for class targets, R² for real targets.
pub fn evaluate(trained: &TrainedModel, data: &DatasetSplit, exec: Execution) -> Result<Metric> {
    match &data.targets {
        Targets::Classes { labels, .. } => Ok(Metric {
            kind: MetricKind::Accuracy,
            value: accuracy(&classify(trained, data.inputs.view(), exec)?, labels)?,
        }),
        Targets::Values(y) => Ok(Metric {
            kind: MetricKind::R2,
            value: r_squared(&regress(trained, data.inputs.view(), exec)?, y)?,
        }),
    }
}

/// CSV with `sample_id, vote_0.., prediction[, label]`.
pub fn write_predictions<W: Write>(
    writer: W,
    preds: &[ClassPrediction],
    labels: Option<&[usize]>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let layers = preds.first().map_or(0, |p| p.votes.len());
    let mut header = vec!["sample_id".to_string()];
    header.extend((0..layers).map(|l| format!("vote_{l}")));
    header.push("prediction".into());
    if labels.is_some() {
        header.push("label".into());
    }
    w.write_record(&header)?;
    for (i, p) in preds.iter().enumerate() {
        let mut rec = vec![i.to_string()];
        rec.extend(p.votes.iter().map(|v| v.to_string()));
        rec.push(p.class.to_string());
        if let Some(l) = labels {
            rec.push(l[i].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<predictions>", e))?;
    Ok(())
}
