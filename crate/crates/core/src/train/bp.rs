use std::time::Instant;

use ndarray::{ArrayView2, Axis};

use super::{epoch_batches, BatchTargets, EpochRecord, Regime, RunConfig, TrainLog};
use crate::data::DatasetSplit;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::inference::{evaluate, TrainedModel};
use crate::loss::{cross_entropy_loss, mse_loss};
use crate::nn::backprop::{dense_backprop_gradient, Loss};
use crate::nn::Model;
use crate::rng::Rng;
use crate::zoo::{dd_step_with, CountingObjective, ParameterView};

fn global_loss(
    model: &Model,
    x: ArrayView2<'_, f64>,
    y: &BatchTargets,
    exec: Execution,
) -> Result<f64> {
    let out = model.forward(x, exec)?;
    match y {
        BatchTargets::Classes(labels) => cross_entropy_loss(out.view(), labels),
        BatchTargets::Values(t) => {
            crate::error::check_dim(1, out.ncols(), "regression output width")?;
            mse_loss(&out.column(0).to_vec(), t)
        }
    }
}

fn start_log(cfg: &RunConfig, regime: Regime) -> Result<TrainLog> {
    if cfg.regime != regime {
        return Err(Error::invalid(format!(
            "config regime is {}, expected {regime}",
            cfg.regime
        )));
    }
    Ok(TrainLog {
        epochs_per_unit: cfg.epochs,
        total_unit_epochs: cfg.epochs,
        ..Default::default()
    })
}

fn record(
    log: &mut TrainLog,
    model: &Model,
    epoch: usize,
    objective: f64,
    eval: Option<&DatasetSplit>,
    exec: Execution,
    start: Instant,
) -> Result<()> {
    let metric = match eval {
        Some(d) => Some(evaluate(&TrainedModel::Global(model.clone()), d, exec)?.value),
        None => None,
    };
    log.records.push(EpochRecord {
        epoch,
        unit_id: "global".into(),
        objective,
        metric,
        eval_count: log.evaluations,
        seconds: start.elapsed().as_secs_f64(),
    });
    Ok(())
}

/// End-to-end training of every parameter with the directional-derivative
/// estimator on the negated global loss.
pub fn train_bp_dd(
    mut model: Model,
    data: &DatasetSplit,
    cfg: &RunConfig,
    eval: Option<&DatasetSplit>,
    rng: &mut Rng,
) -> Result<(Model, TrainLog)> {
    let mut log = start_log(cfg, Regime::BpDd)?;
    cfg.validate(model.spec())?;
    let dd = cfg.dd();
    let start = Instant::now();
    let mut view = ParameterView::new(model.parameters())?;
    for epoch in 0..cfg.epochs {
        let (mut total, mut batches) = (0.0, 0);
        for idx in epoch_batches(data.len(), cfg.batch_size, rng) {
            let xb = data.inputs.select(Axis(0), &idx);
            let yb = BatchTargets::gather(&data.targets, &idx);
            let base = &model;
            let f = CountingObjective::new(|p: &[f64]| {
                base.with_parameters(p)
                    .and_then(|m| global_loss(&m, xb.view(), &yb, Execution::Sequential))
                    .map_or(f64::NAN, |l| -l)
            });
            let v = dd_step_with(&f, &mut view, &dd, rng, cfg.exec);
            log.evaluations += f.calls();
            total += v?;
            batches += 1;
        }
        model.set_parameters(view.as_slice())?;
        record(
            &mut log,
            &model,
            epoch,
            total / batches.max(1) as f64,
            eval,
            cfg.exec,
            start,
        )?;
    }
    Ok((model, log))
}

/// End-to-end training with exact gradients (dense models only). Dropout
/// stages are active here.
pub fn train_bp_ad(
    mut model: Model,
    data: &DatasetSplit,
    cfg: &RunConfig,
    eval: Option<&DatasetSplit>,
    rng: &mut Rng,
) -> Result<(Model, TrainLog)> {
    let mut log = start_log(cfg, Regime::BpAd)?;
    cfg.validate(model.spec())?;
    let start = Instant::now();
    let mut params = model.parameters();
    for epoch in 0..cfg.epochs {
        let (mut total, mut batches) = (0.0, 0);
        for idx in epoch_batches(data.len(), cfg.batch_size, rng) {
            let xb = data.inputs.select(Axis(0), &idx);
            let yb = BatchTargets::gather(&data.targets, &idx);
            let loss = match &yb {
                BatchTargets::Classes(labels) => Loss::CrossEntropy { labels },
                BatchTargets::Values(targets) => Loss::Mse { targets },
            };
            let g = dense_backprop_gradient(&model, loss, xb.view(), Some(rng))?;
            if !g.loss.is_finite() {
                return Err(Error::NonFiniteObjective(g.loss));
            }
            for (p, d) in params.iter_mut().zip(&g.grad) {
                *p -= cfg.learning_rate * d;
            }
            model.set_parameters(&params)?;
            log.evaluations += 1;
            total -= g.loss;
            batches += 1;
        }
        record(
            &mut log,
            &model,
            epoch,
            total / batches.max(1) as f64,
            eval,
            cfg.exec,
            start,
        )?;
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_parameters, ModelSpec, TaskKind};
    use crate::rng::seeded;
    use crate::train::fixtures::{blobs, smooth_regression};

    fn cfg(regime: Regime, epochs: usize, lr: f64) -> RunConfig {
        let mut c = RunConfig::new(regime);
        c.epochs = epochs;
        c.batch_size = 32;
        c.learning_rate = lr;
        c
    }

    #[test]
    fn zero_epochs_returns_the_initial_model() {
        let spec = ModelSpec::mlp(4, &[5], Some(3), TaskKind::Classification { classes: 3 });
        let model = init_parameters(&spec, &mut seeded(0)).unwrap();
        let data = blobs(30, 3, 4, 0);
        let (a, log) = train_bp_ad(
            model.clone(),
            &data,
            &cfg(Regime::BpAd, 0, 0.1),
            None,
            &mut seeded(1),
        )
        .unwrap();
        assert_eq!(a, model);
        assert!(log.records.is_empty());
        let (b, log) = train_bp_dd(
            model.clone(),
            &data,
            &cfg(Regime::BpDd, 0, 0.1),
            None,
            &mut seeded(1),
        )
        .unwrap();
        assert_eq!(b, model);
        assert!(log.records.is_empty());
    }

    #[test]
    fn exact_step_matches_finite_difference_step() {
        let spec = ModelSpec::mlp(2, &[3], Some(1), TaskKind::Regression);
        let model = init_parameters(&spec, &mut seeded(0)).unwrap();
        let data = smooth_regression(16, 0);
        let mut c = cfg(Regime::BpAd, 1, 0.1);
        c.batch_size = 16;
        let (trained, _) = train_bp_ad(model.clone(), &data, &c, None, &mut seeded(0)).unwrap();
        let p0 = model.parameters();
        let y = BatchTargets::gather(&data.targets, &(0..16).collect::<Vec<_>>());
        let loss = |p: &[f64]| {
            global_loss(
                &model.with_parameters(p).unwrap(),
                data.inputs.view(),
                &y,
                Execution::Sequential,
            )
            .unwrap()
        };
        let h = 1e-6;
        for (i, after) in trained.parameters().iter().enumerate() {
            let mut up = p0.clone();
            let mut down = p0.clone();
            up[i] += h;
            down[i] -= h;
            let g = (loss(&up) - loss(&down)) / (2.0 * h);
            assert!((after - (p0[i] - 0.1 * g)).abs() < 1e-7, "param {i}");
        }
    }

    #[test]
    fn dd_training_reduces_the_loss() {
        let spec = ModelSpec::mlp(4, &[8], Some(3), TaskKind::Classification { classes: 3 });
        let model = init_parameters(&spec, &mut seeded(0)).unwrap();
        let data = blobs(300, 3, 4, 0);
        let (_, log) = train_bp_dd(
            model,
            &data,
            &cfg(Regime::BpDd, 30, 0.05),
            Some(&data),
            &mut seeded(2),
        )
        .unwrap();
        let first = log.records[0].objective;
        let last = log.records.last().unwrap().objective;
        assert!(last > first, "{first} -> {last}");
        assert_eq!(log.evaluations, 2 * 10 * 30);
        assert!(log
            .records
            .iter()
            .all(|r| r.metric.is_some() && r.unit_id == "global"));
    }

    #[test]
    fn exact_training_fits_blobs() {
        let spec = ModelSpec::mlp(4, &[8], Some(3), TaskKind::Classification { classes: 3 });
        let model = init_parameters(&spec, &mut seeded(0)).unwrap();
        let train = blobs(300, 3, 4, 0);
        let test = blobs(300, 3, 4, 1);
        let (_, log) = train_bp_ad(
            model,
            &train,
            &cfg(Regime::BpAd, 20, 0.5),
            Some(&test),
            &mut seeded(0),
        )
        .unwrap();
        assert!(log.last_metric().unwrap() >= 0.95);
    }

    #[test]
    fn regime_mismatch_is_rejected() {
        let spec = ModelSpec::mlp(4, &[5], Some(3), TaskKind::Classification { classes: 3 });
        let model = init_parameters(&spec, &mut seeded(0)).unwrap();
        let data = blobs(30, 3, 4, 0);
        assert!(train_bp_ad(
            model,
            &data,
            &cfg(Regime::BpDd, 1, 0.1),
            None,
            &mut seeded(0)
        )
        .is_err());
    }
}
