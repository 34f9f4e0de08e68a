//! Exact gradients for dense networks by reverse-mode chain rule.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng as _;

use super::{Model, Stage};
use crate::error::{check_dim, Error, Result};
use crate::goodness::UnitTarget;
use crate::loss::{cross_entropy_with_grad, mse_with_grad};
use crate::rng::Rng;

/// What to differentiate.
#[derive(Clone, Copy, Debug)]
pub enum Loss<'a> {
    /// Softmax cross-entropy on the model output.
    CrossEntropy { labels: &'a [usize] },
    /// Mean squared error on a single-column model output.
    Mse { targets: &'a [f64] },
    /// Negated layer objective of the dense stage `stage`.
    LayerGoodness {
        stage: usize,
        target: UnitTarget<'a>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    pub loss: f64,
    /// Same layout as [`Model::parameters`].
    pub grad: Vec<f64>,
}

/// Gradient of `loss` over the batch `x` with respect to every model
/// parameter. With `dropout` set, dropout stages sample inverted masks from
/// that rng; without it they are the identity.
pub fn dense_backprop_gradient(
    model: &Model,
    loss: Loss<'_>,
    x: ArrayView2<'_, f64>,
    mut dropout: Option<&mut Rng>,
) -> Result<Gradient> {
    if !model.spec().is_dense_only() {
        return Err(Error::Unsupported(
            "exact gradients are only available for dense networks".into(),
        ));
    }
    check_dim(
        model.stage_input_shape(0).len(),
        x.ncols(),
        "model input features",
    )?;
    let end = match loss {
        Loss::LayerGoodness { stage, .. } => {
            if !matches!(model.stages().get(stage), Some(Stage::Dense(_))) {
                return Err(Error::invalid(format!(
                    "stage {stage} is not a dense layer"
                )));
            }
            stage + 1
        }
        _ => model.stages().len(),
    };

    let mut inputs: Vec<Array2<f64>> = Vec::with_capacity(end);
    let mut masks: Vec<Option<Array2<f64>>> = Vec::with_capacity(end);
    let mut h = x.to_owned();
    for stage in &model.stages()[..end] {
        inputs.push(h.clone());
        let mut mask = None;
        h = match stage {
            Stage::Dense(l) => l.forward_batch(h.view())?,
            Stage::Activation(a) => {
                a.apply_batch(&mut h);
                h
            }
            Stage::Dropout(rate) => match dropout.as_deref_mut() {
                Some(rng) if *rate > 0.0 => {
                    let keep = 1.0 - rate;
                    let m = Array2::from_shape_simple_fn(h.raw_dim(), || {
                        if rng.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    });
                    let out = &h * &m;
                    mask = Some(m);
                    out
                }
                _ => h,
            },
            _ => unreachable!("dense-only checked"),
        };
        masks.push(mask);
    }

    let (value, mut g) = match loss {
        Loss::CrossEntropy { labels } => cross_entropy_with_grad(h.view(), labels)?,
        Loss::Mse { targets } => mse_with_grad(h.view(), targets)?,
        Loss::LayerGoodness { target, .. } => {
            check_dim(target.len(), h.nrows(), "targets vs batch")?;
            check_dim(target.tap_dim(), h.ncols(), "tap width")?;
            let v = -target.batch_objective(h.view());
            (v, -target.batch_objective_gradient(h.view()))
        }
    };

    let ranges = param_offsets(model);
    let mut grad = vec![0.0; model.param_count()];
    for i in (0..end).rev() {
        match &model.stages()[i] {
            Stage::Dense(l) => {
                let gw = g.t().dot(&inputs[i]);
                let gb = g.sum_axis(Axis(0));
                let dst = &mut grad[ranges[i].clone()];
                let nw = gw.len();
                for (d, v) in dst[..nw].iter_mut().zip(gw.iter()) {
                    *d = *v;
                }
                for (d, v) in dst[nw..].iter_mut().zip(gb.iter()) {
                    *d = *v;
                }
                if i > 0 {
                    g = g.dot(l.weights());
                }
            }
            Stage::Activation(a) => {
                for (mut grow, zrow) in g.rows_mut().into_iter().zip(inputs[i].rows()) {
                    let d = a.derivative(&zrow.to_vec()).ok_or_else(|| {
                        Error::Unsupported(format!("activation `{}` has no derivative", a.name()))
                    })?;
                    for (gv, dv) in grow.iter_mut().zip(d) {
                        *gv *= dv;
                    }
                }
            }
            Stage::Dropout(_) => {
                if let Some(m) = &masks[i] {
                    g *= m;
                }
            }
            _ => unreachable!(),
        }
    }
    Ok(Gradient { loss: value, grad })
}

fn param_offsets(model: &Model) -> Vec<std::ops::Range<usize>> {
    let mut start = 0;
    model
        .stages()
        .iter()
        .map(|s| {
            let n = match s {
                Stage::Dense(l) => l.param_count(),
                Stage::Conv { layer, .. } => layer.param_count(),
                _ => 0,
            };
            start += n;
            start - n..start
        })
        .collect()
}
