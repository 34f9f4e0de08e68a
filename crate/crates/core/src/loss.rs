//! Global losses for the backpropagation baselines. All reductions are
//! batch means.

use ndarray::{Array2, ArrayView1, ArrayView2};

use crate::error::{check_dim, Error, Result};

fn log_softmax_row(row: ArrayView1<'_, f64>) -> (f64, f64) {
    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    (max, lse)
}

fn check_labels(logits: ArrayView2<'_, f64>, labels: &[usize]) -> Result<()> {
    check_dim(logits.nrows(), labels.len(), "labels vs logits rows")?;
    if logits.nrows() == 0 {
        return Err(Error::invalid("empty batch"));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= logits.ncols()) {
        return Err(Error::InvalidLabel(y));
    }
    Ok(())
}

/// Softmax cross-entropy of `batch x classes` logits.
pub fn cross_entropy_loss(logits: ArrayView2<'_, f64>, labels: &[usize]) -> Result<f64> {
    check_labels(logits, labels)?;
    let total: f64 = logits
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(row, &y)| log_softmax_row(row).1 - row[y])
        .sum();
    Ok(total / labels.len() as f64)
}

/// Cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy_with_grad(
    logits: ArrayView2<'_, f64>,
    labels: &[usize],
) -> Result<(f64, Array2<f64>)> {
    check_labels(logits, labels)?;
    let b = labels.len() as f64;
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut total = 0.0;
    for ((row, mut g), &y) in logits.rows().into_iter().zip(grad.rows_mut()).zip(labels) {
        let (_, lse) = log_softmax_row(row);
        total += lse - row[y];
        for (gi, &v) in g.iter_mut().zip(row.iter()) {
            *gi = (v - lse).exp() / b;
        }
        g[y] -= 1.0 / b;
    }
    Ok((total / b, grad))
}

/// Mean squared error between predictions and targets.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_dim(target.len(), pred.len(), "predictions vs targets")?;
    if pred.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    Ok(pred
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t).powi(2))
        .sum::<f64>()
        / pred.len() as f64)
}

/// MSE of a single-column prediction matrix, with its gradient.
pub fn mse_with_grad(pred: ArrayView2<'_, f64>, target: &[f64]) -> Result<(f64, Array2<f64>)> {
    check_dim(1, pred.ncols(), "regression output width")?;
    let column: Vec<f64> = pred.column(0).to_vec();
    let loss = mse_loss(&column, target)?;
    let b = target.len() as f64;
    let grad = Array2::from_shape_fn(pred.raw_dim(), |(i, _)| 2.0 * (column[i] - target[i]) / b);
    Ok((loss, grad))
}
