use std::time::Instant;

use ndarray::{Array2, ArrayView2, Axis};

use super::{epoch_batches, BatchTargets, EpochRecord, Regime, RunConfig, TrainLog};
use crate::data::DatasetSplit;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::goodness::{ClassificationObjectiveConfig, UnitTarget};
use crate::inference::{accuracy, r_squared, FfModel, Predictor};
use crate::nn::{Model, ModelSpec, PreparedInput, Stage, TaskKind, UnitId};
use crate::prototype::{regression_prototypes, PrototypeSet, TapPrototypes};
use crate::rng::Rng;
use crate::zoo::{dd_step_with, CountingObjective, ParameterView};

/// Cached stage inputs above this many scalars are recomputed per batch
/// instead.
const CACHE_LIMIT: usize = 1 << 26;

/// Fresh random prototypes for every training unit of `spec`.
pub fn assign_prototypes<R: rand::Rng + ?Sized>(
    spec: &ModelSpec,
    rng: &mut R,
) -> Result<Vec<TapPrototypes>> {
    spec.validate_taps()?;
    spec.unit_tap_dims()
        .into_iter()
        .map(|d| match spec.task {
            TaskKind::Classification { classes } => Ok(TapPrototypes::Classification(
                PrototypeSet::random(classes, d, rng)?,
            )),
            TaskKind::Regression => Ok(TapPrototypes::Regression(regression_prototypes(d, rng)?)),
        })
        .collect()
}

/// Inputs to the stage currently being trained.
enum StageInputs {
    Cached(Array2<f64>),
    Recompute,
}

impl StageInputs {
    fn batch(
        &self,
        model: &Model,
        data: &DatasetSplit,
        stage: usize,
        idx: &[usize],
        exec: Execution,
    ) -> Result<Array2<f64>> {
        match self {
            StageInputs::Cached(h) => Ok(h.select(Axis(0), idx)),
            StageInputs::Recompute => {
                let x = data.inputs.select(Axis(0), idx);
                model.forward_until(x.view(), stage, exec)
            }
        }
    }
}

fn unit_target<'a>(
    prototypes: &'a TapPrototypes,
    targets: &'a BatchTargets,
    objective: &'a ClassificationObjectiveConfig,
) -> Result<UnitTarget<'a>> {
    match (prototypes, targets) {
        (TapPrototypes::Classification(set), BatchTargets::Classes(labels)) => {
            Ok(UnitTarget::Classification {
                labels,
                prototypes: set,
                objective,
            })
        }
        (TapPrototypes::Regression(pair), BatchTargets::Values(values)) => {
            Ok(UnitTarget::Regression {
                targets: values,
                prototypes: pair,
            })
        }
        _ => Err(Error::invalid("prototype kind does not match the targets")),
    }
}

/// Train units in forward order, each for `cfg.epochs` epochs with all
/// earlier units frozen. When `eval` is given, the held-out metric of the
/// layers trained so far is logged after each stage completes.
pub fn train_ff(
    mut ff: FfModel,
    data: &DatasetSplit,
    cfg: &RunConfig,
    eval: Option<&DatasetSplit>,
    rng: &mut Rng,
) -> Result<(FfModel, TrainLog)> {
    if !cfg.regime.is_layer_local() {
        return Err(Error::invalid(format!(
            "{} is not a layer-local regime",
            cfg.regime
        )));
    }
    cfg.validate(ff.model.spec())?;
    let units = ff.model.units();
    let mut log = TrainLog {
        epochs_per_unit: cfg.epochs,
        total_unit_epochs: cfg.epochs * units.len(),
        ..Default::default()
    };
    let start = Instant::now();
    let mut stage = 0;
    let mut inputs = stage_inputs(&ff.model, data, 0, cfg.exec)?;
    let mut layers_done = 0;
    for (k, &unit) in units.iter().enumerate() {
        if unit.stage != stage {
            inputs = advance(&ff.model, data, inputs, stage, unit.stage, cfg.exec)?;
            stage = unit.stage;
        }
        train_unit_with(&mut ff, k, data, &inputs, cfg, rng, &mut log, start)?;
        let stage_done = units.get(k + 1).is_none_or(|next| next.stage != unit.stage);
        if stage_done {
            layers_done += 1;
            if let Some(eval) = eval {
                let m = partial_metric(&ff, eval, layers_done, cfg.exec)?;
                if let Some(last) = log.records.last_mut() {
                    last.metric = Some(m);
                }
            }
        }
    }
    Ok((ff, log))
}

fn stage_inputs(
    model: &Model,
    data: &DatasetSplit,
    stage: usize,
    exec: Execution,
) -> Result<StageInputs> {
    let width = model.stage_input_shape(stage).len();
    if data.len() * width > CACHE_LIMIT {
        return Ok(StageInputs::Recompute);
    }
    Ok(StageInputs::Cached(model.forward_until(
        data.inputs.view(),
        stage,
        exec,
    )?))
}

fn advance(
    model: &Model,
    data: &DatasetSplit,
    current: StageInputs,
    from: usize,
    to: usize,
    exec: Execution,
) -> Result<StageInputs> {
    let width = model.stage_input_shape(to).len();
    match current {
        StageInputs::Cached(mut h) if data.len() * width <= CACHE_LIMIT => {
            for i in from..to {
                h = model.apply_stage(i, h, exec)?;
            }
            Ok(StageInputs::Cached(h))
        }
        _ => stage_inputs(model, data, to, exec),
    }
}

fn partial_metric(
    ff: &FfModel,
    eval: &DatasetSplit,
    layers: usize,
    exec: Execution,
) -> Result<f64> {
    let p = Predictor::new(ff, exec);
    match &eval.targets {
        crate::data::Targets::Classes { labels, .. } => {
            let preds: Vec<usize> = p
                .predict_class(eval.inputs.view(), Some(layers))?
                .into_iter()
                .map(|x| x.class)
                .collect();
            accuracy(&preds, labels)
        }
        crate::data::Targets::Values(y) => {
            let preds: Vec<f64> = p
                .predict_regression(eval.inputs.view(), Some(layers))?
                .into_iter()
                .map(|x| x.value)
                .collect();
            r_squared(&preds, y)
        }
    }
}

/// Train the `k`-th unit on `data` for `cfg.epochs` epochs, appending to
/// `log`. Earlier units keep their current parameters.
pub fn train_unit(
    ff: &mut FfModel,
    k: usize,
    data: &DatasetSplit,
    cfg: &RunConfig,
    rng: &mut Rng,
    log: &mut TrainLog,
) -> Result<()> {
    if !cfg.regime.is_layer_local() {
        return Err(Error::invalid(format!(
            "{} is not a layer-local regime",
            cfg.regime
        )));
    }
    let unit = *ff
        .model
        .units()
        .get(k)
        .ok_or_else(|| Error::invalid(format!("no training unit {k}")))?;
    let inputs = stage_inputs(&ff.model, data, unit.stage, cfg.exec)?;
    train_unit_with(ff, k, data, &inputs, cfg, rng, log, Instant::now())
}

#[allow(clippy::too_many_arguments)]
fn train_unit_with(
    ff: &mut FfModel,
    k: usize,
    data: &DatasetSplit,
    inputs: &StageInputs,
    cfg: &RunConfig,
    rng: &mut Rng,
    log: &mut TrainLog,
    start: Instant,
) -> Result<()> {
    let unit = ff.model.units()[k];
    let objective = cfg.objective_config();
    let dd = cfg.dd();
    let mut params = ff.model.unit_parameters(unit)?;
    let mut scratch = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        let mut batches = 0usize;
        for idx in epoch_batches(data.len(), cfg.batch_size, rng) {
            let xb = inputs.batch(&ff.model, data, unit.stage, &idx, cfg.exec)?;
            let yb = BatchTargets::gather(&data.targets, &idx);
            let target = unit_target(&ff.prototypes[k], &yb, &objective)?;
            let prepared = ff.model.prepare_input_with(
                unit.stage,
                xb.view(),
                cfg.exec,
                std::mem::take(&mut scratch),
            )?;
            let value = match cfg.regime {
                Regime::FfDd => {
                    let model = &ff.model;
                    let f = CountingObjective::new(|p: &[f64]| {
                        model
                            .unit_tap(unit, &prepared, p)
                            .map_or(f64::NAN, |t| target.batch_objective(t.view()))
                    });
                    let mut view = ParameterView::new(std::mem::take(&mut params))?;
                    let v = dd_step_with(&f, &mut view, &dd, rng, cfg.exec);
                    params = view.into_vec();
                    log.evaluations += f.calls();
                    v?
                }
                _ => {
                    log.evaluations += 1;
                    exact_unit_step(
                        &ff.model,
                        unit,
                        &prepared,
                        xb.view(),
                        &target,
                        &mut params,
                        cfg.learning_rate,
                    )?
                }
            };
            scratch = prepared.into_scratch();
            total += value;
            batches += 1;
        }
        log.records.push(EpochRecord {
            epoch,
            unit_id: unit.to_string(),
            objective: total / batches.max(1) as f64,
            metric: None,
            eval_count: log.evaluations,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    ff.model.set_unit_parameters(unit, &params)
}

/// Exact ascent step for a dense unit: tap gradient `G`, then
/// `dW = G^T x`, `db = sum_rows G`.
fn exact_unit_step(
    model: &Model,
    unit: UnitId,
    prepared: &PreparedInput<'_>,
    x: ArrayView2<'_, f64>,
    target: &UnitTarget<'_>,
    params: &mut [f64],
    learning_rate: f64,
) -> Result<f64> {
    if !matches!(model.stages()[unit.stage], Stage::Dense(_)) {
        return Err(Error::Unsupported(
            "exact unit gradients need a dense unit".into(),
        ));
    }
    let tap = model.unit_tap(unit, prepared, params)?;
    let value = target.batch_objective(tap.view());
    if !value.is_finite() {
        return Err(Error::NonFiniteObjective(value));
    }
    let g = target.batch_objective_gradient(tap.view());
    let dw = g.t().dot(&x);
    let db = g.sum_axis(Axis(0));
    let n = dw.len();
    for (p, d) in params[..n].iter_mut().zip(dw.iter()) {
        *p += learning_rate * d;
    }
    for (p, d) in params[n..].iter_mut().zip(db.iter()) {
        *p += learning_rate * d;
    }
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::Execution;
    use crate::nn::init_parameters;
    use crate::rng::seeded;
    use crate::train::fixtures::{blobs, smooth_regression};

    fn ff_model(spec: &ModelSpec, seed: u64) -> FfModel {
        let model = init_parameters(spec, &mut seeded(seed)).unwrap();
        let protos = assign_prototypes(spec, &mut seeded(seed + 1)).unwrap();
        FfModel::new(model, protos).unwrap()
    }

    fn classifier() -> ModelSpec {
        ModelSpec::mlp(4, &[8], Some(3), TaskKind::Classification { classes: 3 })
    }

    fn cfg(regime: Regime, epochs: usize, lr: f64) -> RunConfig {
        let mut c = RunConfig::new(regime);
        c.epochs = epochs;
        c.batch_size = 32;
        c.learning_rate = lr;
        c
    }

    #[test]
    fn dd_training_separates_blobs() {
        let train = blobs(300, 3, 4, 0);
        let test = blobs(300, 3, 4, 1);
        let spec = ModelSpec::mlp(4, &[8], None, TaskKind::Classification { classes: 3 });
        let (ff, log) = train_ff(
            ff_model(&spec, 3),
            &train,
            &cfg(Regime::FfDd, 40, 0.05),
            Some(&test),
            &mut seeded(4),
        )
        .unwrap();
        let acc = log.last_metric().unwrap();
        assert!(acc >= 0.95, "accuracy {acc}");
        assert_eq!(ff.num_layers(), 1);
    }

    #[test]
    fn evaluation_count_is_two_per_direction_per_batch() {
        let train = blobs(100, 3, 4, 0);
        let spec = ModelSpec::mlp(4, &[], Some(3), TaskKind::Classification { classes: 3 });
        let mut c = cfg(Regime::FfDd, 3, 0.01);
        c.directions = 2;
        let (_, log) = train_ff(ff_model(&spec, 0), &train, &c, None, &mut seeded(0)).unwrap();
        // 4 batches of at most 32
        assert_eq!(log.evaluations, 2 * 2 * 4 * 3);
        assert_eq!(log.records.last().unwrap().eval_count, log.evaluations);
        assert_eq!(log.total_unit_epochs, 3);
    }

    #[test]
    fn training_later_units_leaves_earlier_ones_bit_identical() {
        let train = blobs(90, 3, 4, 0);
        let mut ff = ff_model(&classifier(), 0);
        let mut log = TrainLog::default();
        let c = cfg(Regime::FfDd, 2, 0.05);
        train_unit(&mut ff, 0, &train, &c, &mut seeded(1), &mut log).unwrap();
        let units = ff.model.units();
        let frozen = ff.model.unit_parameters(units[0]).unwrap();
        let before = ff.model.unit_parameters(units[1]).unwrap();
        train_unit(&mut ff, 1, &train, &c, &mut seeded(2), &mut log).unwrap();
        assert_eq!(ff.model.unit_parameters(units[0]).unwrap(), frozen);
        assert_ne!(ff.model.unit_parameters(units[1]).unwrap(), before);
    }

    #[test]
    fn later_units_do_not_influence_earlier_training() {
        let train = blobs(90, 3, 4, 0);
        let c = cfg(Regime::FfDd, 2, 0.05);
        let mut clean = ff_model(&classifier(), 0);
        let mut poisoned = clean.clone();
        let later = poisoned.model.units()[1];
        let n = poisoned.model.unit_param_count(later).unwrap();
        poisoned
            .model
            .set_unit_parameters(later, &vec![f64::NAN; n])
            .unwrap();
        let mut log = TrainLog::default();
        train_unit(&mut clean, 0, &train, &c, &mut seeded(5), &mut log).unwrap();
        train_unit(&mut poisoned, 0, &train, &c, &mut seeded(5), &mut log).unwrap();
        let first = clean.model.units()[0];
        assert_eq!(
            clean.model.unit_parameters(first).unwrap(),
            poisoned.model.unit_parameters(first).unwrap()
        );
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let train = blobs(60, 3, 4, 0);
        for regime in [Regime::FfDd, Regime::FfAd] {
            let ff = ff_model(&classifier(), 0);
            let (out, log) = train_ff(
                ff.clone(),
                &train,
                &cfg(regime, 2, 0.0),
                None,
                &mut seeded(1),
            )
            .unwrap();
            assert_eq!(out, ff, "{regime}");
            assert_eq!(log.records.len(), 4);
        }
    }

    #[test]
    fn exact_full_batch_ascent_is_monotone() {
        let train = smooth_regression(64, 0);
        let spec = ModelSpec::mlp(2, &[6], None, TaskKind::Regression);
        let mut c = cfg(Regime::FfAd, 30, 0.05);
        c.batch_size = 64;
        let (_, log) = train_ff(ff_model(&spec, 1), &train, &c, None, &mut seeded(0)).unwrap();
        let obj: Vec<f64> = log.records.iter().map(|r| r.objective).collect();
        for w in obj.windows(2) {
            assert!(w[1] >= w[0] - 1e-12, "{obj:?}");
        }
        assert!(obj[obj.len() - 1] > obj[0]);
        assert_eq!(log.evaluations, 30);
    }

    #[test]
    fn exact_step_matches_full_orthogonal_estimate() {
        // A full orthonormal direction set turns the estimate into the
        // central-difference gradient.
        let train = blobs(40, 3, 4, 0);
        let spec = ModelSpec::mlp(4, &[], Some(3), TaskKind::Classification { classes: 3 });
        let ff = ff_model(&spec, 2);
        let unit = ff.model.units()[0];
        let n = ff.model.unit_param_count(unit).unwrap();
        let mut ad = cfg(Regime::FfAd, 1, 1e-3);
        ad.batch_size = 40;
        let mut dd = ad.clone();
        dd.regime = Regime::FfDd;
        dd.directions = n;
        dd.sampling = crate::zoo::DirectionSampling::Orthogonal;
        dd.epsilon = 1e-5;
        let (a, _) = train_ff(ff.clone(), &train, &ad, None, &mut seeded(0)).unwrap();
        let (b, _) = train_ff(ff, &train, &dd, None, &mut seeded(0)).unwrap();
        let pa = a.model.parameters();
        let pb = b.model.parameters();
        for (x, y) in pa.iter().zip(&pb) {
            assert!((x - y).abs() < 1e-8, "{x} vs {y}");
        }
    }

    #[test]
    fn conv_units_train_channel_by_channel() {
        use crate::data::{DatasetSplit, SplitTag};
        use crate::nn::{ConvGeometry, TensorShape};
        let base = blobs(40, 3, 16, 0);
        let data = DatasetSplit::new(
            base.inputs.clone(),
            TensorShape::new(1, 4, 4),
            base.targets.clone(),
            SplitTag::Train,
        )
        .unwrap();
        let spec = ModelSpec::cnn(
            TensorShape::new(1, 4, 4),
            &[(2, ConvGeometry::square(3, 1, 1))],
            10,
            Some(crate::nn::MaxPool::default()),
            &[],
            0.0,
            TaskKind::Classification { classes: 3 },
        );
        let c = cfg(Regime::FfDd, 2, 0.01);
        let (ff, log) =
            train_ff(ff_model(&spec, 0), &data, &c, Some(&data), &mut seeded(0)).unwrap();
        let ids: Vec<&str> = log.records.iter().map(|r| r.unit_id.as_str()).collect();
        assert_eq!(ids, ["s0c0", "s0c0", "s0c1", "s0c1"]);
        assert!(log.records[3].metric.is_some());
        assert!(log.records[1].metric.is_none());
        assert_eq!(ff.prototypes.len(), 2);
    }

    #[test]
    fn global_regime_is_rejected() {
        let train = blobs(30, 3, 4, 0);
        let ff = ff_model(&classifier(), 0);
        assert!(train_ff(ff, &train, &cfg(Regime::BpDd, 1, 0.1), None, &mut seeded(0)).is_err());
    }

    #[test]
    fn stage_inputs_fall_back_to_recompute() {
        let train = blobs(30, 3, 4, 0);
        let ff = ff_model(&classifier(), 0);
        let cached = stage_inputs(&ff.model, &train, 2, Execution::Sequential).unwrap();
        let idx = [3, 1, 4];
        let a = cached
            .batch(&ff.model, &train, 2, &idx, Execution::Sequential)
            .unwrap();
        let b = StageInputs::Recompute
            .batch(&ff.model, &train, 2, &idx, Execution::Sequential)
            .unwrap();
        assert_eq!(a, b);
    }
}
