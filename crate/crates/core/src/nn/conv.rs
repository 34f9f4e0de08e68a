use ndarray::{Array1, Array2, Array4, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::TensorShape;
use crate::error::{check_dim, Error, Result};
use crate::exec::Execution;

/// Output length along one spatial axis:
/// `floor((n + 2p - d(k - 1) - 1) / s + 1)`.
pub fn conv_output_dim(
    n: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Result<usize> {
    if kernel == 0 || stride == 0 || dilation == 0 {
        return Err(Error::invalid(
            "kernel, stride and dilation must be positive",
        ));
    }
    let span = dilation * (kernel - 1) + 1;
    let padded = n + 2 * padding;
    if padded < span {
        return Err(Error::invalid(format!(
            "kernel span {span} exceeds padded input {padded}"
        )));
    }
    Ok((padded - span) / stride + 1)
}

/// Convolution hyperparameters, `(height, width)` pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
}

impl ConvGeometry {
    pub fn square(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel: (kernel, kernel),
            stride: (stride, stride),
            padding: (padding, padding),
            dilation: (1, 1),
        }
    }

    pub fn output_hw(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        Ok((
            conv_output_dim(
                height,
                self.kernel.0,
                self.stride.0,
                self.padding.0,
                self.dilation.0,
            )?,
            conv_output_dim(
                width,
                self.kernel.1,
                self.stride.1,
                self.padding.1,
                self.dilation.1,
            )?,
        ))
    }
}

/// Cross-correlation layer with kernels `C_out x C_in x K_h x K_w`.
///
/// Flattened parameter order is channel by channel: the channel's kernel
/// (row-major over `C_in, K_h, K_w`) followed by its bias. A channel's
/// parameters are therefore contiguous.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    kernels: Array4<f64>,
    bias: Array1<f64>,
    pub geometry: ConvGeometry,
    pub trainable: bool,
}

impl ConvLayer {
    pub fn new(kernels: Array4<f64>, bias: Array1<f64>, geometry: ConvGeometry) -> Result<Self> {
        check_dim(kernels.shape()[0], bias.len(), "conv bias length")?;
        check_dim(geometry.kernel.0, kernels.shape()[2], "conv kernel height")?;
        check_dim(geometry.kernel.1, kernels.shape()[3], "conv kernel width")?;
        Ok(Self {
            kernels,
            bias,
            geometry,
            trainable: true,
        })
    }

    /// Kernels uniform in `±sqrt(1/fan_in)` with `fan_in = C_in K_h K_w`.
    pub fn init<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        geometry: ConvGeometry,
        rng: &mut R,
    ) -> Self {
        let (kh, kw) = geometry.kernel;
        let s = (1.0 / (in_channels * kh * kw) as f64).sqrt();
        let kernels = Array4::from_shape_simple_fn((out_channels, in_channels, kh, kw), || {
            rng.random_range(-s..s)
        });
        Self {
            kernels,
            bias: Array1::zeros(out_channels),
            geometry,
            trainable: true,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.kernels.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.kernels.shape()[0]
    }

    pub fn kernels(&self) -> &Array4<f64> {
        &self.kernels
    }

    pub fn bias(&self) -> &Array1<f64> {
        &self.bias
    }

    /// Scalars per output channel: `C_in K_h K_w + 1`.
    pub fn channel_param_count(&self) -> usize {
        self.kernels.len() / self.out_channels() + 1
    }

    pub fn param_count(&self) -> usize {
        self.kernels.len() + self.bias.len()
    }

    pub fn output_shape(&self, input: TensorShape) -> Result<TensorShape> {
        check_dim(self.in_channels(), input.channels, "conv input channels")?;
        let (h, w) = self.geometry.output_hw(input.height, input.width)?;
        Ok(TensorShape::new(self.out_channels(), h, w))
    }

    fn kernel_matrix(&self) -> ArrayView2<'_, f64> {
        let k = self.channel_param_count() - 1;
        self.kernels
            .view()
            .into_shape_with_order((self.out_channels(), k))
            .expect("kernels are contiguous")
    }

    /// Batch forward; rows of `x` are samples flattened as `C x H x W`.
    pub fn forward_batch(
        &self,
        x: ArrayView2<'_, f64>,
        input: TensorShape,
        exec: Execution,
    ) -> Result<Array2<f64>> {
        let out = self.output_shape(input)?;
        let cols = im2col(x, input, &self.geometry, exec)?;
        let hw = out.height * out.width;
        let z = cols.dot(&self.kernel_matrix().t());
        let batch = x.nrows();
        let mut y = Array2::zeros((batch, out.len()));
        for (b, mut row) in y.rows_mut().into_iter().enumerate() {
            for c in 0..out.channels {
                let bias = self.bias[c];
                for p in 0..hw {
                    row[c * hw + p] = z[[b * hw + p, c]] + bias;
                }
            }
        }
        Ok(y)
    }

    pub fn channel_params(&self, channel: usize) -> Vec<f64> {
        let mut out: Vec<f64> = self.kernel_matrix().row(channel).to_vec();
        out.push(self.bias[channel]);
        out
    }

    pub fn set_channel_params(&mut self, channel: usize, flat: &[f64]) -> Result<()> {
        check_dim(
            self.channel_param_count(),
            flat.len(),
            "conv channel parameters",
        )?;
        let k = flat.len() - 1;
        for (w, v) in self
            .kernels
            .index_axis_mut(Axis(0), channel)
            .iter_mut()
            .zip(&flat[..k])
        {
            *w = *v;
        }
        self.bias[channel] = flat[k];
        Ok(())
    }

    pub(crate) fn write_params(&self, out: &mut Vec<f64>) {
        for c in 0..self.out_channels() {
            out.extend(self.channel_params(c));
        }
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        check_dim(self.param_count(), flat.len(), "conv parameters")?;
        let per = self.channel_param_count();
        for c in 0..self.out_channels() {
            self.set_channel_params(c, &flat[c * per..(c + 1) * per])?;
        }
        Ok(())
    }
}

/// Unfold a batch into patch rows: row `b * HW_out + p` holds the receptive
/// field of output position `p` of sample `b`, ordered `C_in, K_h, K_w`.
/// Out-of-range taps read zero padding.
pub fn im2col(
    x: ArrayView2<'_, f64>,
    input: TensorShape,
    geometry: &ConvGeometry,
    exec: Execution,
) -> Result<Array2<f64>> {
    im2col_into(x, input, geometry, exec, Vec::new())
}

/// [`im2col`] writing into `buf`, whose allocation is reused.
pub fn im2col_into(
    x: ArrayView2<'_, f64>,
    input: TensorShape,
    geometry: &ConvGeometry,
    exec: Execution,
    mut buf: Vec<f64>,
) -> Result<Array2<f64>> {
    check_dim(input.len(), x.ncols(), "conv input features")?;
    let (oh, ow) = geometry.output_hw(input.height, input.width)?;
    let (kh, kw) = geometry.kernel;
    let patch = input.channels * kh * kw;
    let hw = oh * ow;
    buf.clear();
    buf.resize(x.nrows() * hw * patch, 0.0);
    // Source coordinate per (output, kernel) offset along each axis; None in padding.
    let axis = |out: usize, k: usize, stride: usize, dilation: usize, pad: usize, size: usize| {
        (0..out)
            .flat_map(|o| {
                (0..k).map(move |j| {
                    (o * stride + j * dilation)
                        .checked_sub(pad)
                        .filter(|&i| i < size)
                })
            })
            .collect::<Vec<_>>()
    };
    let ys = axis(
        oh,
        kh,
        geometry.stride.0,
        geometry.dilation.0,
        geometry.padding.0,
        input.height,
    );
    let xs = axis(
        ow,
        kw,
        geometry.stride.1,
        geometry.dilation.1,
        geometry.padding.1,
        input.width,
    );
    let plane = input.height * input.width;
    exec.fill_chunks(&mut buf, hw * patch, |b, cols| {
        let owned;
        let row = match x.row(b).to_slice() {
            Some(r) => r,
            None => {
                owned = x.row(b).to_vec();
                &owned[..]
            }
        };
        for (p, out) in cols.chunks_exact_mut(patch).enumerate() {
            let (oy, ox) = (p / ow, p % ow);
            let xrow = &xs[ox * kw..(ox + 1) * kw];
            for c in 0..input.channels {
                for (ky, iy) in ys[oy * kh..(oy + 1) * kh].iter().enumerate() {
                    let Some(iy) = iy else { continue };
                    let src = &row[c * plane + iy * input.width..];
                    let dst = &mut out[(c * kh + ky) * kw..(c * kh + ky + 1) * kw];
                    for (d, ix) in dst.iter_mut().zip(xrow) {
                        if let Some(ix) = ix {
                            *d = src[*ix];
                        }
                    }
                }
            }
        }
    });
    Ok(Array2::from_shape_vec((x.nrows() * hw, patch), buf).expect("sized above"))
}

/// Max pooling with floor semantics: trailing rows and columns that do not
/// fill a window are dropped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaxPool {
    pub size: usize,
    pub stride: usize,
}

impl Default for MaxPool {
    fn default() -> Self {
        Self { size: 2, stride: 2 }
    }
}

impl MaxPool {
    pub fn output_shape(&self, input: TensorShape) -> Result<TensorShape> {
        if self.size == 0 || self.stride == 0 {
            return Err(Error::invalid("pool size and stride must be positive"));
        }
        if input.height < self.size || input.width < self.size {
            return Err(Error::invalid(format!(
                "pool window {} exceeds {}x{} input",
                self.size, input.height, input.width
            )));
        }
        Ok(TensorShape::new(
            input.channels,
            (input.height - self.size) / self.stride + 1,
            (input.width - self.size) / self.stride + 1,
        ))
    }

    pub fn forward_batch(&self, x: ArrayView2<'_, f64>, input: TensorShape) -> Result<Array2<f64>> {
        check_dim(input.len(), x.ncols(), "pool input features")?;
        let out = self.output_shape(input)?;
        let mut y = Array2::zeros((x.nrows(), out.len()));
        for (row, mut dst) in x.rows().into_iter().zip(y.rows_mut()) {
            for c in 0..out.channels {
                for oy in 0..out.height {
                    for ox in 0..out.width {
                        let mut m = f64::NEG_INFINITY;
                        for dy in 0..self.size {
                            for dx in 0..self.size {
                                let iy = oy * self.stride + dy;
                                let ix = ox * self.stride + dx;
                                m = m.max(row[(c * input.height + iy) * input.width + ix]);
                            }
                        }
                        dst[(c * out.height + oy) * out.width + ox] = m;
                    }
                }
            }
        }
        Ok(y)
    }
}

/// Frozen random map `A: d_proj x (H W)` reducing one channel's feature map
/// to a prototype-sized vector. Entries are `N(0, 1/d_proj)` so squared
/// norms are preserved in expectation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomProjection {
    matrix: Array2<f64>,
}

impl RandomProjection {
    pub fn new(matrix: Array2<f64>) -> Self {
        Self { matrix }
    }

    pub fn sample<R: Rng + ?Sized>(out_dim: usize, in_dim: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, 1.0 / (out_dim as f64).sqrt()).expect("positive std");
        Self {
            matrix: Array2::from_shape_simple_fn((out_dim, in_dim), || normal.sample(rng)),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn project(&self, channel: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        check_dim(self.in_dim(), channel.len(), "projection input")?;
        Ok(self.matrix.dot(&channel))
    }

    /// Project each row of `x` (`batch x H W`).
    pub fn project_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        check_dim(self.in_dim(), x.ncols(), "projection input")?;
        Ok(x.dot(&self.matrix.t()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array};
    use proptest::prelude::*;
    use rand::Rng;

    fn naive_conv(layer: &ConvLayer, x: &[f64], input: TensorShape) -> Vec<f64> {
        let out = layer.output_shape(input).unwrap();
        let g = layer.geometry;
        let mut y = vec![0.0; out.len()];
        for co in 0..out.channels {
            for oy in 0..out.height {
                for ox in 0..out.width {
                    let mut s = layer.bias()[co];
                    for ci in 0..input.channels {
                        for ky in 0..g.kernel.0 {
                            for kx in 0..g.kernel.1 {
                                let iy = (oy * g.stride.0 + ky * g.dilation.0) as isize
                                    - g.padding.0 as isize;
                                let ix = (ox * g.stride.1 + kx * g.dilation.1) as isize
                                    - g.padding.1 as isize;
                                if iy < 0
                                    || ix < 0
                                    || iy >= input.height as isize
                                    || ix >= input.width as isize
                                {
                                    continue;
                                }
                                s += layer.kernels()[[co, ci, ky, kx]]
                                    * x[(ci * input.height + iy as usize) * input.width
                                        + ix as usize];
                            }
                        }
                    }
                    y[(co * out.height + oy) * out.width + ox] = s;
                }
            }
        }
        y
    }

    #[test]
    fn output_dim_examples() {
        assert_eq!(conv_output_dim(28, 6, 1, 2, 1).unwrap(), 27);
        assert_eq!(conv_output_dim(13, 6, 1, 2, 1).unwrap(), 12);
        assert_eq!(conv_output_dim(5, 3, 2, 0, 2).unwrap(), 1);
        assert!(conv_output_dim(2, 5, 1, 0, 1).is_err());
    }

    #[test]
    fn pooling_examples() {
        let pool = MaxPool::default();
        let shape = TensorShape::new(1, 2, 2);
        let y = pool
            .forward_batch(array![[1.0, 2.0, 3.0, 4.0]].view(), shape)
            .unwrap();
        assert_eq!(y, array![[4.0]]);
        let shape = TensorShape::new(2, 27, 27);
        assert_eq!(
            pool.output_shape(shape).unwrap(),
            TensorShape::new(2, 13, 13)
        );
        let x = Array2::from_elem((1, shape.len()), 0.7);
        let y = pool.forward_batch(x.view(), shape).unwrap();
        assert!(y.iter().all(|&v| v == 0.7));
    }

    #[test]
    fn one_by_one_kernel_scales_input() {
        let layer = ConvLayer::new(
            Array4::from_elem((1, 1, 1, 1), 2.5),
            array![0.5],
            ConvGeometry::square(1, 1, 0),
        )
        .unwrap();
        let shape = TensorShape::new(1, 3, 2);
        let x = array![[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]];
        let y = layer
            .forward_batch(x.view(), shape, Execution::Sequential)
            .unwrap();
        assert_eq!(y, x.mapv(|v| 2.5 * v + 0.5));
    }

    #[test]
    fn ones_kernel_sums_input() {
        let layer = ConvLayer::new(
            Array4::ones((1, 1, 3, 3)),
            array![-1.0],
            ConvGeometry::square(3, 1, 0),
        )
        .unwrap();
        let x = Array::linspace(1.0, 9.0, 9).insert_axis(Axis(0));
        let y = layer
            .forward_batch(x.view(), TensorShape::new(1, 3, 3), Execution::Sequential)
            .unwrap();
        assert_eq!(y, array![[44.0]]);
    }

    #[test]
    fn channel_params_round_trip() {
        let mut rng = seeded(1);
        let mut layer = ConvLayer::init(2, 3, ConvGeometry::square(3, 1, 1), &mut rng);
        assert_eq!(layer.channel_param_count(), 19);
        let mut flat = Vec::new();
        layer.write_params(&mut flat);
        assert_eq!(flat.len(), layer.param_count());
        let copy = layer.clone();
        layer.set_params(&flat).unwrap();
        assert_eq!(layer, copy);
        let mut p = layer.channel_params(1);
        p[0] = 42.0;
        layer.set_channel_params(1, &p).unwrap();
        assert_eq!(layer.kernels()[[1, 0, 0, 0]], 42.0);
        assert_eq!(layer.channel_params(0), copy.channel_params(0));
    }

    #[test]
    fn projection_examples() {
        let channel = Array::linspace(0.0, 1.5, 16);
        let id = RandomProjection::new(Array2::eye(16));
        assert_eq!(id.project(channel.view()).unwrap(), channel);
        let zero = RandomProjection::new(Array2::zeros((10, 16)));
        assert!(zero
            .project(channel.view())
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
        let a = RandomProjection::sample(10, 16, &mut seeded(2));
        let z = a.project(channel.view()).unwrap();
        for i in 0..10 {
            let hand: f64 = (0..16).map(|j| a.matrix()[[i, j]] * channel[j]).sum();
            assert_abs_diff_eq!(z[i], hand, epsilon = 1e-12);
        }
        assert!(a.project(Array1::zeros(15).view()).is_err());
    }

    proptest! {
        #[test]
        fn output_dims_match_floor_formula(
            h in 1usize..20, k in 1usize..5, s in 1usize..4, p in 0usize..3, d in 1usize..3
        ) {
            let num = h as i64 + 2 * p as i64 - d as i64 * (k as i64 - 1) - 1;
            match conv_output_dim(h, k, s, p, d) {
                Ok(out) => prop_assert_eq!(out as i64, num.div_euclid(s as i64) + 1),
                Err(_) => prop_assert!(num < 0),
            }
        }

        #[test]
        fn im2col_forward_matches_naive(
            seed in 0u64..1000, cin in 1usize..3, cout in 1usize..3,
            h in 3usize..7, w in 3usize..7, k in 1usize..4, s in 1usize..3, p in 0usize..2, d in 1usize..3
        ) {
            let geometry = ConvGeometry {
                kernel: (k, k), stride: (s, s), padding: (p, p), dilation: (d, d),
            };
            let input = TensorShape::new(cin, h, w);
            prop_assume!(geometry.output_hw(h, w).is_ok());
            let mut rng = seeded(seed);
            let mut layer = ConvLayer::init(cin, cout, geometry, &mut rng);
            let bias: Vec<f64> = (0..cout).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut params = Vec::new();
            layer.write_params(&mut params);
            let per = layer.channel_param_count();
            for (c, b) in bias.iter().enumerate() {
                params[c * per + per - 1] = *b;
            }
            layer.set_params(&params).unwrap();
            let x = Array2::from_shape_simple_fn((2, input.len()), || rng.random_range(-1.0..1.0));
            let y = layer.forward_batch(x.view(), input, Execution::Parallel).unwrap();
            for b in 0..2 {
                let expect = naive_conv(&layer, x.row(b).as_slice().unwrap(), input);
                for (a, e) in y.row(b).iter().zip(&expect) {
                    prop_assert!((a - e).abs() < 1e-12);
                }
            }
        }
    }
}
