//! Forward evaluation of dense and convolutional networks.
//!
//! Activations travel between stages as `batch x features` matrices, with
//! image features flattened channel-major (`C x H x W`). Every trainable
//! stage exposes a tap: a dense layer's pre-activation output, or for a
//! convolution, each channel's pre-activation map passed through that
//! channel's frozen random projection.

pub mod activation;
pub mod backprop;
pub mod checkpoint;
pub mod conv;
pub mod dense;

use std::fmt;
use std::ops::Range;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use activation::{register_activation, ActivationBox, ActivationFn};
pub use checkpoint::Checkpoint;
pub use conv::{conv_output_dim, ConvGeometry, ConvLayer, MaxPool, RandomProjection};
pub use dense::DenseLayer;

use crate::error::{check_dim, Error, Result};
use crate::exec::Execution;

/// Per-sample feature layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl TensorShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    /// A plain vector of `n` features.
    pub fn flat(n: usize) -> Self {
        Self::new(n, 1, 1)
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    Classification { classes: usize },
    Regression,
}

impl TaskKind {
    /// Smallest admissible tap dimension.
    pub fn min_tap_dim(&self) -> usize {
        match *self {
            TaskKind::Classification { classes } => classes,
            TaskKind::Regression => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum StageSpec {
    Dense {
        out: usize,
    },
    Conv {
        out_channels: usize,
        geometry: ConvGeometry,
        /// Projected size of each channel's tap.
        proj_dim: usize,
    },
    Activation {
        activation: ActivationBox,
    },
    MaxPool {
        pool: MaxPool,
    },
    Dropout {
        rate: f64,
    },
}

impl StageSpec {
    pub fn relu() -> Self {
        StageSpec::Activation {
            activation: ActivationBox::relu(),
        }
    }

    pub fn is_trainable(&self) -> bool {
        matches!(self, StageSpec::Dense { .. } | StageSpec::Conv { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input: TensorShape,
    pub stages: Vec<StageSpec>,
    pub task: TaskKind,
}

impl ModelSpec {
    /// Dense layers of the given widths with ReLU after each, optionally
    /// followed by a linear head of `head` outputs.
    pub fn mlp(input_dim: usize, hidden: &[usize], head: Option<usize>, task: TaskKind) -> Self {
        let mut stages = Vec::new();
        for &w in hidden {
            stages.push(StageSpec::Dense { out: w });
            stages.push(StageSpec::relu());
        }
        if let Some(out) = head {
            stages.push(StageSpec::Dense { out });
        }
        Self {
            input: TensorShape::flat(input_dim),
            stages,
            task,
        }
    }

    /// Conv, ReLU and optional pooling per conv layer, then dense layers
    /// (each preceded by dropout when `dropout > 0`, ReLU between them).
    pub fn cnn(
        input: TensorShape,
        convs: &[(usize, ConvGeometry)],
        proj_dim: usize,
        pool: Option<MaxPool>,
        dense: &[usize],
        dropout: f64,
        task: TaskKind,
    ) -> Self {
        let mut stages = Vec::new();
        for &(out_channels, geometry) in convs {
            stages.push(StageSpec::Conv {
                out_channels,
                geometry,
                proj_dim,
            });
            stages.push(StageSpec::relu());
            if let Some(pool) = pool {
                stages.push(StageSpec::MaxPool { pool });
            }
        }
        for (i, &out) in dense.iter().enumerate() {
            if dropout > 0.0 {
                stages.push(StageSpec::Dropout { rate: dropout });
            }
            stages.push(StageSpec::Dense { out });
            if i + 1 < dense.len() {
                stages.push(StageSpec::relu());
            }
        }
        Self {
            input,
            stages,
            task,
        }
    }

    /// Input shape of every stage followed by the output shape.
    pub fn shapes(&self) -> Result<Vec<TensorShape>> {
        let mut shapes = vec![self.input];
        let mut cur = self.input;
        for stage in &self.stages {
            cur = match stage {
                StageSpec::Dense { out } => {
                    if *out == 0 {
                        return Err(Error::invalid("dense width must be positive"));
                    }
                    TensorShape::flat(*out)
                }
                StageSpec::Conv {
                    out_channels,
                    geometry,
                    proj_dim,
                } => {
                    if *out_channels == 0 || *proj_dim == 0 {
                        return Err(Error::invalid(
                            "conv channels and projection size must be positive",
                        ));
                    }
                    let (h, w) = geometry.output_hw(cur.height, cur.width)?;
                    TensorShape::new(*out_channels, h, w)
                }
                StageSpec::MaxPool { pool } => pool.output_shape(cur)?,
                StageSpec::Activation { .. } => cur,
                StageSpec::Dropout { rate } => {
                    if !(0.0..1.0).contains(rate) {
                        return Err(Error::invalid(format!(
                            "dropout rate {rate} outside [0, 1)"
                        )));
                    }
                    cur
                }
            };
            shapes.push(cur);
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input.is_empty() {
            return Err(Error::invalid("empty input shape"));
        }
        if !self.stages.iter().any(StageSpec::is_trainable) {
            return Err(Error::invalid("model has no trainable stage"));
        }
        if let TaskKind::Classification { classes } = self.task {
            if classes < 2 {
                return Err(Error::invalid("classification needs at least two classes"));
            }
        }
        self.shapes().map(|_| ())
    }

    /// Tap dimension of every training unit, in unit order.
    pub fn unit_tap_dims(&self) -> Vec<usize> {
        let mut dims = Vec::new();
        for stage in &self.stages {
            match stage {
                StageSpec::Dense { out } => dims.push(*out),
                StageSpec::Conv {
                    out_channels,
                    proj_dim,
                    ..
                } => dims.extend(std::iter::repeat_n(*proj_dim, *out_channels)),
                _ => {}
            }
        }
        dims
    }

    /// Check that every tap can host the task's prototypes.
    pub fn validate_taps(&self) -> Result<()> {
        self.validate()?;
        let min = self.task.min_tap_dim();
        if let Some(d) = self.unit_tap_dims().into_iter().find(|&d| d < min) {
            return Err(Error::invalid(format!(
                "tap dimension {d} is below the required {min}"
            )));
        }
        Ok(())
    }

    /// Number of trainable scalars (weights and biases only).
    pub fn param_count(&self) -> Result<usize> {
        let shapes = self.shapes()?;
        Ok(self
            .stages
            .iter()
            .zip(&shapes)
            .map(|(stage, input)| match stage {
                StageSpec::Dense { out } => out * input.len() + out,
                StageSpec::Conv {
                    out_channels,
                    geometry,
                    ..
                } => out_channels * (input.channels * geometry.kernel.0 * geometry.kernel.1 + 1),
                _ => 0,
            })
            .sum())
    }

    pub fn is_dense_only(&self) -> bool {
        !self
            .stages
            .iter()
            .any(|s| matches!(s, StageSpec::Conv { .. } | StageSpec::MaxPool { .. }))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Stage {
    Dense(DenseLayer),
    Conv {
        layer: ConvLayer,
        projections: Vec<RandomProjection>,
    },
    Activation(ActivationBox),
    MaxPool(MaxPool),
    Dropout(f64),
}

/// A parameter group trained by one local objective: a dense layer or a
/// single conv channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UnitId {
    pub stage: usize,
    pub channel: Option<usize>,
}

impl fmt::Display for UnitId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.channel {
            Some(c) => write!(f, "s{}c{}", self.stage, c),
            None => write!(f, "s{}", self.stage),
        }
    }
}

/// Tap output of one trainable stage: one `batch x dim` matrix per unit.
#[derive(Clone, Debug, PartialEq)]
pub struct Tap {
    pub stage: usize,
    pub channels: Vec<Array2<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Forward {
    pub taps: Vec<Tap>,
    pub output: Array2<f64>,
}

impl Forward {
    /// Tap matrices flattened into unit order.
    pub fn unit_taps(&self) -> impl Iterator<Item = &Array2<f64>> {
        self.taps.iter().flat_map(|t| t.channels.iter())
    }
}

/// A stage input made ready for repeated unit evaluations.
pub enum PreparedInput<'a> {
    Dense(ArrayView2<'a, f64>),
    Conv {
        cols: Array2<f64>,
        batch: usize,
        positions: usize,
    },
}

impl PreparedInput<'_> {
    /// Hand back the owned buffer for reuse by [`Model::prepare_input_with`].
    pub fn into_scratch(self) -> Vec<f64> {
        match self {
            PreparedInput::Dense(_) => Vec::new(),
            PreparedInput::Conv { cols, .. } => cols.into_raw_vec_and_offset().0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    spec: ModelSpec,
    stages: Vec<Stage>,
    shapes: Vec<TensorShape>,
}

/// Build a model from its spec: weights uniform in `±sqrt(1/fan_in)`,
/// zero biases, projections `N(0, 1/d_proj)`.
pub fn init_parameters<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<Model> {
    spec.validate()?;
    let shapes = spec.shapes()?;
    let mut stages = Vec::with_capacity(spec.stages.len());
    for (i, s) in spec.stages.iter().enumerate() {
        let input = shapes[i];
        stages.push(match s {
            StageSpec::Dense { out } => Stage::Dense(DenseLayer::init(input.len(), *out, rng)),
            StageSpec::Conv {
                out_channels,
                geometry,
                proj_dim,
            } => {
                let layer = ConvLayer::init(input.channels, *out_channels, *geometry, rng);
                let out = shapes[i + 1];
                let projections = (0..*out_channels)
                    .map(|_| RandomProjection::sample(*proj_dim, out.height * out.width, rng))
                    .collect();
                Stage::Conv { layer, projections }
            }
            StageSpec::Activation { activation } => Stage::Activation(activation.clone()),
            StageSpec::MaxPool { pool } => Stage::MaxPool(*pool),
            StageSpec::Dropout { rate } => Stage::Dropout(*rate),
        });
    }
    Ok(Model {
        spec: spec.clone(),
        stages,
        shapes,
    })
}

impl Model {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn stage_mut(&mut self, index: usize) -> &mut Stage {
        &mut self.stages[index]
    }

    pub fn stage_input_shape(&self, index: usize) -> TensorShape {
        self.shapes[index]
    }

    pub fn output_shape(&self) -> TensorShape {
        *self.shapes.last().expect("shapes include the input")
    }

    pub fn units(&self) -> Vec<UnitId> {
        let mut units = Vec::new();
        for (stage, s) in self.stages.iter().enumerate() {
            match s {
                Stage::Dense(_) => units.push(UnitId {
                    stage,
                    channel: None,
                }),
                Stage::Conv { layer, .. } => {
                    units.extend((0..layer.out_channels()).map(|c| UnitId {
                        stage,
                        channel: Some(c),
                    }))
                }
                _ => {}
            }
        }
        units
    }

    pub fn param_count(&self) -> usize {
        self.stages
            .iter()
            .map(|s| match s {
                Stage::Dense(l) => l.param_count(),
                Stage::Conv { layer, .. } => layer.param_count(),
                _ => 0,
            })
            .sum()
    }

    fn check_unit(&self, unit: UnitId) -> Result<()> {
        let ok = match (self.stages.get(unit.stage), unit.channel) {
            (Some(Stage::Dense(_)), None) => true,
            (Some(Stage::Conv { layer, .. }), Some(c)) => c < layer.out_channels(),
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("no training unit {unit}")))
        }
    }

    pub fn unit_param_count(&self, unit: UnitId) -> Result<usize> {
        self.check_unit(unit)?;
        Ok(match &self.stages[unit.stage] {
            Stage::Dense(l) => l.param_count(),
            Stage::Conv { layer, .. } => layer.channel_param_count(),
            _ => unreachable!(),
        })
    }

    /// Position of a unit's parameters inside [`Model::parameters`].
    pub fn unit_param_range(&self, unit: UnitId) -> Result<Range<usize>> {
        self.check_unit(unit)?;
        let mut start = 0;
        for (i, s) in self.stages.iter().enumerate() {
            match s {
                Stage::Dense(l) if i == unit.stage => return Ok(start..start + l.param_count()),
                Stage::Conv { layer, .. } if i == unit.stage => {
                    let per = layer.channel_param_count();
                    let c = unit.channel.expect("checked");
                    return Ok(start + c * per..start + (c + 1) * per);
                }
                Stage::Dense(l) => start += l.param_count(),
                Stage::Conv { layer, .. } => start += layer.param_count(),
                _ => {}
            }
        }
        unreachable!("unit checked above")
    }

    pub fn unit_parameters(&self, unit: UnitId) -> Result<Vec<f64>> {
        self.check_unit(unit)?;
        Ok(match &self.stages[unit.stage] {
            Stage::Dense(l) => l.params(),
            Stage::Conv { layer, .. } => layer.channel_params(unit.channel.expect("checked")),
            _ => unreachable!(),
        })
    }

    pub fn set_unit_parameters(&mut self, unit: UnitId, values: &[f64]) -> Result<()> {
        self.check_unit(unit)?;
        match &mut self.stages[unit.stage] {
            Stage::Dense(l) => l.set_params(values),
            Stage::Conv { layer, .. } => {
                layer.set_channel_params(unit.channel.expect("checked"), values)
            }
            _ => unreachable!(),
        }
    }

    /// All trainable scalars in stage order.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for s in &self.stages {
            match s {
                Stage::Dense(l) => l.write_params(&mut out),
                Stage::Conv { layer, .. } => layer.write_params(&mut out),
                _ => {}
            }
        }
        out
    }

    pub fn set_parameters(&mut self, values: &[f64]) -> Result<()> {
        check_dim(self.param_count(), values.len(), "model parameters")?;
        let mut start = 0;
        for s in &mut self.stages {
            match s {
                Stage::Dense(l) => {
                    let n = l.param_count();
                    l.set_params(&values[start..start + n])?;
                    start += n;
                }
                Stage::Conv { layer, .. } => {
                    let n = layer.param_count();
                    layer.set_params(&values[start..start + n])?;
                    start += n;
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// A copy of the model carrying `values` as its parameters.
    pub fn with_parameters(&self, values: &[f64]) -> Result<Model> {
        let mut m = self.clone();
        m.set_parameters(values)?;
        Ok(m)
    }

    /// Frozen projection matrices of every conv stage, in stage order.
    pub fn projections(&self) -> Vec<&RandomProjection> {
        self.stages
            .iter()
            .flat_map(|s| match s {
                Stage::Conv { projections, .. } => projections.iter().collect(),
                _ => Vec::new(),
            })
            .collect()
    }

    pub(crate) fn projections_mut(&mut self) -> Vec<&mut RandomProjection> {
        self.stages
            .iter_mut()
            .flat_map(|s| match s {
                Stage::Conv { projections, .. } => projections.iter_mut().collect(),
                _ => Vec::new(),
            })
            .collect()
    }

    fn check_input(&self, x: ArrayView2<'_, f64>) -> Result<()> {
        check_dim(self.shapes[0].len(), x.ncols(), "model input features")
    }

    /// Evaluate one stage in inference mode (dropout is the identity).
    pub fn apply_stage(
        &self,
        index: usize,
        x: Array2<f64>,
        exec: Execution,
    ) -> Result<Array2<f64>> {
        let input = self.shapes[index];
        check_dim(input.len(), x.ncols(), "stage input features")?;
        Ok(match &self.stages[index] {
            Stage::Dense(l) => l.forward_batch(x.view())?,
            Stage::Conv { layer, .. } => layer.forward_batch(x.view(), input, exec)?,
            Stage::Activation(a) => {
                let mut x = x;
                a.apply_batch(&mut x);
                x
            }
            Stage::MaxPool(p) => p.forward_batch(x.view(), input)?,
            Stage::Dropout(_) => x,
        })
    }

    /// Run stages `0..end` and return the input of stage `end`.
    pub fn forward_until(
        &self,
        x: ArrayView2<'_, f64>,
        end: usize,
        exec: Execution,
    ) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let mut h = x.to_owned();
        for i in 0..end {
            h = self.apply_stage(i, h, exec)?;
        }
        Ok(h)
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>, exec: Execution) -> Result<Array2<f64>> {
        self.forward_until(x, self.stages.len(), exec)
    }

    /// One pass collecting every trainable stage's tap.
    pub fn forward_with_taps(&self, x: ArrayView2<'_, f64>, exec: Execution) -> Result<Forward> {
        self.check_input(x)?;
        let mut taps = Vec::new();
        let mut h = x.to_owned();
        for i in 0..self.stages.len() {
            h = self.apply_stage(i, h, exec)?;
            match &self.stages[i] {
                Stage::Dense(_) => taps.push(Tap {
                    stage: i,
                    channels: vec![h.clone()],
                }),
                Stage::Conv { projections, .. } => {
                    let out = self.shapes[i + 1];
                    taps.push(Tap {
                        stage: i,
                        channels: conv_taps(h.view(), out, projections)?,
                    });
                }
                _ => {}
            }
        }
        Ok(Forward { taps, output: h })
    }

    /// Precompute what [`Model::unit_tap`] needs from a stage input.
    pub fn prepare_input<'a>(
        &self,
        stage: usize,
        x: ArrayView2<'a, f64>,
        exec: Execution,
    ) -> Result<PreparedInput<'a>> {
        self.prepare_input_with(stage, x, exec, Vec::new())
    }

    /// [`Model::prepare_input`] reusing the allocation of `scratch`.
    pub fn prepare_input_with<'a>(
        &self,
        stage: usize,
        x: ArrayView2<'a, f64>,
        exec: Execution,
        scratch: Vec<f64>,
    ) -> Result<PreparedInput<'a>> {
        let input = self.shapes[stage];
        check_dim(input.len(), x.ncols(), "stage input features")?;
        match &self.stages[stage] {
            Stage::Dense(_) => Ok(PreparedInput::Dense(x)),
            Stage::Conv { layer, .. } => {
                let out = self.shapes[stage + 1];
                Ok(PreparedInput::Conv {
                    cols: conv::im2col_into(x, input, &layer.geometry, exec, scratch)?,
                    batch: x.nrows(),
                    positions: out.height * out.width,
                })
            }
            _ => Err(Error::invalid(format!("stage {stage} is not trainable"))),
        }
    }

    /// The tap of `unit` when its parameters are replaced by `params`. Reads
    /// no parameters of any other unit.
    pub fn unit_tap(
        &self,
        unit: UnitId,
        input: &PreparedInput<'_>,
        params: &[f64],
    ) -> Result<Array2<f64>> {
        check_dim(
            self.unit_param_count(unit)?,
            params.len(),
            "unit parameters",
        )?;
        match (&self.stages[unit.stage], input) {
            (Stage::Dense(l), PreparedInput::Dense(x)) => {
                dense::dense_forward_flat(*x, params, l.out_dim())
            }
            (
                Stage::Conv { projections, .. },
                PreparedInput::Conv {
                    cols,
                    batch,
                    positions,
                },
            ) => {
                let k = params.len() - 1;
                let mut z = cols.dot(&ArrayView1::from(&params[..k]));
                z += params[k];
                let z = z
                    .into_shape_with_order((*batch, *positions))
                    .expect("cols rows are batch x positions");
                projections[unit.channel.expect("checked")].project_batch(z.view())
            }
            _ => Err(Error::invalid(format!(
                "prepared input does not match unit {unit}"
            ))),
        }
    }
}

fn conv_taps(
    z: ArrayView2<'_, f64>,
    shape: TensorShape,
    projections: &[RandomProjection],
) -> Result<Vec<Array2<f64>>> {
    let hw = shape.height * shape.width;
    projections
        .iter()
        .enumerate()
        .map(|(c, p)| p.project_batch(z.slice(ndarray::s![.., c * hw..(c + 1) * hw])))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn classifier(classes: usize) -> TaskKind {
        TaskKind::Classification { classes }
    }

    #[test]
    fn single_dense_tap_is_output() {
        let spec = ModelSpec::mlp(3, &[], Some(2), classifier(2));
        let model = init_parameters(&spec, &mut seeded(0)).unwrap();
        let x = array![[0.1, 0.2, 0.3], [1.0, -1.0, 0.5]];
        let f = model
            .forward_with_taps(x.view(), Execution::Sequential)
            .unwrap();
        assert_eq!(f.taps.len(), 1);
        assert_eq!(f.taps[0].channels[0], f.output);
    }

    #[test]
    fn handcrafted_two_layer_mlp() {
        let spec = ModelSpec::mlp(2, &[2], Some(1), TaskKind::Regression);
        let mut model = init_parameters(&spec, &mut seeded(0)).unwrap();
        // W1 = [[1, -1], [2, 0]], b1 = [0, -1]; W2 = [[1, 3]], b2 = [0.5]
        model
            .set_parameters(&[1.0, -1.0, 2.0, 0.0, 0.0, -1.0, 1.0, 3.0, 0.5])
            .unwrap();
        let x = array![[1.0, 2.0]];
        let f = model
            .forward_with_taps(x.view(), Execution::Sequential)
            .unwrap();
        assert_eq!(f.taps[0].channels[0], array![[-1.0, 1.0]]);
        assert_eq!(f.taps[1].channels[0], array![[3.5]]);
    }

    #[test]
    fn conv_tap_count_is_channels_plus_dense() {
        let spec = ModelSpec::cnn(
            TensorShape::new(1, 8, 8),
            &[
                (3, ConvGeometry::square(3, 1, 1)),
                (2, ConvGeometry::square(3, 1, 1)),
            ],
            10,
            Some(MaxPool::default()),
            &[10],
            0.0,
            classifier(10),
        );
        let model = init_parameters(&spec, &mut seeded(1)).unwrap();
        assert_eq!(model.units().len(), 3 + 2 + 1);
        let x = Array2::from_shape_fn((4, 64), |(i, j)| ((i * 64 + j) % 7) as f64 / 7.0);
        let f = model
            .forward_with_taps(x.view(), Execution::Parallel)
            .unwrap();
        assert_eq!(f.unit_taps().count(), 6);
        assert!(f.unit_taps().take(5).all(|t| t.dim() == (4, 10)));
        assert_eq!(spec.param_count().unwrap(), model.param_count());
        assert_eq!(model.parameters().len(), model.param_count());
    }

    #[test]
    fn unit_tap_matches_forward() {
        let spec = ModelSpec::cnn(
            TensorShape::new(2, 6, 6),
            &[(3, ConvGeometry::square(3, 1, 0))],
            5,
            None,
            &[4],
            0.0,
            classifier(3),
        );
        let model = init_parameters(&spec, &mut seeded(2)).unwrap();
        let x = Array2::from_shape_fn((3, 72), |(i, j)| ((i + 2 * j) % 11) as f64 * 0.1 - 0.5);
        let f = model
            .forward_with_taps(x.view(), Execution::Sequential)
            .unwrap();
        let taps: Vec<_> = f.unit_taps().cloned().collect();
        for (k, unit) in model.units().into_iter().enumerate() {
            let h = model
                .forward_until(x.view(), unit.stage, Execution::Sequential)
                .unwrap();
            let prepared = model
                .prepare_input(unit.stage, h.view(), Execution::Sequential)
                .unwrap();
            let t = model
                .unit_tap(unit, &prepared, &model.unit_parameters(unit).unwrap())
                .unwrap();
            assert_abs_diff_eq!(t, taps[k], epsilon = 1e-12);
        }
    }

    #[test]
    fn unit_ranges_tile_parameters() {
        let spec = ModelSpec::cnn(
            TensorShape::new(1, 5, 5),
            &[(2, ConvGeometry::square(2, 1, 0))],
            3,
            None,
            &[3, 2],
            0.1,
            classifier(2),
        );
        let model = init_parameters(&spec, &mut seeded(3)).unwrap();
        let all = model.parameters();
        let mut next = 0;
        for unit in model.units() {
            let r = model.unit_param_range(unit).unwrap();
            assert_eq!(r.start, next);
            assert_eq!(
                &all[r.clone()],
                model.unit_parameters(unit).unwrap().as_slice()
            );
            next = r.end;
        }
        assert_eq!(next, all.len());
    }

    #[test]
    fn init_is_seeded() {
        let spec = ModelSpec::mlp(10, &[8, 8], Some(3), classifier(3));
        let a = init_parameters(&spec, &mut seeded(9)).unwrap();
        let b = init_parameters(&spec, &mut seeded(9)).unwrap();
        assert_eq!(a, b);
        let c = init_parameters(&spec, &mut seeded(10)).unwrap();
        assert_ne!(a.parameters(), c.parameters());
    }

    #[test]
    fn tap_validation() {
        let spec = ModelSpec::mlp(4, &[5], Some(10), classifier(10));
        assert!(spec.validate_taps().is_err());
        let spec = ModelSpec::mlp(4, &[10], Some(10), classifier(10));
        assert!(spec.validate_taps().is_ok());
        let spec = ModelSpec::mlp(4, &[1], None, TaskKind::Regression);
        assert!(spec.validate_taps().is_err());
    }

    #[test]
    fn dense_param_count() {
        let spec = ModelSpec::mlp(784, &[], Some(10), classifier(10));
        assert_eq!(spec.param_count().unwrap(), 7850);
    }
}
