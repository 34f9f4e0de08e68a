use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Fully connected layer `z = W x + b`.
///
/// Flattened parameter order is `W` row-major followed by `b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    weights: Array2<f64>,
    bias: Array1<f64>,
    pub trainable: bool,
}

impl DenseLayer {
    pub fn new(weights: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        check_dim(weights.nrows(), bias.len(), "dense bias length")?;
        if weights.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("dense layer parameters must be finite"));
        }
        Ok(Self {
            weights,
            bias,
            trainable: true,
        })
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weights: Array2::zeros((out_dim, in_dim)),
            bias: Array1::zeros(out_dim),
            trainable: true,
        }
    }

    /// Weights uniform in `±sqrt(1/fan_in)`, zero bias.
    pub fn init<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let s = (1.0 / in_dim as f64).sqrt();
        let weights = Array2::from_shape_simple_fn((out_dim, in_dim), || rng.random_range(-s..s));
        Self {
            weights,
            bias: Array1::zeros(out_dim),
            trainable: true,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn bias(&self) -> &Array1<f64> {
        &self.bias
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn forward(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        check_dim(self.in_dim(), x.len(), "dense input")?;
        Ok(self.weights.dot(&x) + &self.bias)
    }

    /// Batch forward over the rows of `x`.
    pub fn forward_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        check_dim(self.in_dim(), x.ncols(), "dense input")?;
        Ok(affine(x, self.weights.view(), self.bias.view()))
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.write_params(&mut out);
        out
    }

    pub(crate) fn write_params(&self, out: &mut Vec<f64>) {
        out.extend(self.weights.iter());
        out.extend(self.bias.iter());
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        check_dim(self.param_count(), flat.len(), "dense parameters")?;
        let nw = self.weights.len();
        for (w, v) in self.weights.iter_mut().zip(&flat[..nw]) {
            *w = *v;
        }
        for (b, v) in self.bias.iter_mut().zip(&flat[nw..]) {
            *b = *v;
        }
        Ok(())
    }
}

/// `x W^T + b` for a batch of row vectors.
pub(crate) fn affine(
    x: ArrayView2<'_, f64>,
    w: ArrayView2<'_, f64>,
    b: ArrayView1<'_, f64>,
) -> Array2<f64> {
    let mut z = x.dot(&w.t());
    z += &b.insert_axis(Axis(0));
    z
}

/// Batch forward of a dense layer whose parameters are given as a flat
/// slice in [`DenseLayer`] order.
pub fn dense_forward_flat(
    x: ArrayView2<'_, f64>,
    params: &[f64],
    out_dim: usize,
) -> Result<Array2<f64>> {
    let in_dim = x.ncols();
    check_dim(out_dim * (in_dim + 1), params.len(), "dense parameters")?;
    let (w, b) = params.split_at(out_dim * in_dim);
    let w = ArrayView2::from_shape((out_dim, in_dim), w).expect("checked length");
    Ok(affine(x, w, ArrayView1::from(b)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn identity_and_constant_layers() {
        let x = array![0.5, -2.0, 3.0];
        let id = DenseLayer::new(Array2::eye(3), Array1::zeros(3)).unwrap();
        assert_eq!(id.forward(x.view()).unwrap(), x);
        let c = array![1.0, 2.0];
        let constant = DenseLayer::new(Array2::zeros((2, 3)), c.clone()).unwrap();
        assert_eq!(constant.forward(x.view()).unwrap(), c);
    }

    #[test]
    fn hand_multiplied_case() {
        let w = array![[1.0, 2.0], [-1.0, 0.5], [0.0, 3.0]];
        let b = array![0.1, 0.2, 0.3];
        let layer = DenseLayer::new(w, b).unwrap();
        let z = layer.forward(array![2.0, -1.0].view()).unwrap();
        assert_abs_diff_eq!(z, array![0.1, -2.3, -2.7], epsilon = 1e-12);
    }

    #[test]
    fn shape_errors() {
        let layer = DenseLayer::zeros(3, 2);
        assert!(layer.forward(array![1.0, 2.0].view()).is_err());
        assert!(DenseLayer::new(Array2::zeros((2, 3)), Array1::zeros(3)).is_err());
    }

    #[test]
    fn flat_round_trip_matches_forward() {
        let mut rng = seeded(3);
        let layer = DenseLayer::init(4, 3, &mut rng);
        let x = Array2::from_shape_fn((5, 4), |(i, j)| (i * 4 + j) as f64 * 0.1 - 1.0);
        let a = layer.forward_batch(x.view()).unwrap();
        let b = dense_forward_flat(x.view(), &layer.params(), 3).unwrap();
        assert_eq!(a, b);
        let mut other = DenseLayer::zeros(4, 3);
        other.set_params(&layer.params()).unwrap();
        assert_eq!(other, layer);
    }

    #[test]
    fn init_bounds() {
        let layer = DenseLayer::init(1, 50, &mut seeded(0));
        assert!(layer.weights().iter().all(|w| w.abs() <= 1.0));
        let layer = DenseLayer::init(100, 1000, &mut seeded(1));
        let s = 0.1;
        let n = layer.weights().len() as f64;
        let mean = layer.weights().sum() / n;
        let std = (layer.weights().mapv(|w| (w - mean).powi(2)).sum() / n).sqrt();
        assert!((std / (s / 3f64.sqrt()) - 1.0).abs() < 0.05, "std {std}");
        assert!(layer.bias().iter().all(|&b| b == 0.0));
    }
}
