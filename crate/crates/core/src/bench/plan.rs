use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::data::{DataRequest, DatasetId};
use crate::error::{Error, Result};
use crate::goodness::ObjectiveMode;
use crate::nn::{ConvGeometry, MaxPool, ModelSpec, TaskKind, TensorShape};
use crate::photonic::PhotonicSpec;
use crate::train::{Regime, RunConfig};
use crate::zoo::DirectionSampling;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    #[default]
    Desk,
    Paper,
}

impl Scale {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Scale::Desk),
            "paper" => Ok(Scale::Paper),
            _ => Err(Error::invalid(format!("unknown scale `{s}` (desk|paper)"))),
        }
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scale::Desk => "desk",
            Scale::Paper => "paper",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Mlp,
    Cnn,
    Photonic,
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Mlp => "mlp",
            Arch::Cnn => "cnn",
            Arch::Photonic => "photonic",
        })
    }
}

/// Training knobs after profile resolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub train_size: usize,
    pub test_size: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub epsilon: f64,
    pub margin: f64,
    pub dropout: f64,
    pub objective: ObjectiveMode,
    pub sampling: DirectionSampling,
}

/// Optional overrides of [`Hyper`]; unset keys come from the scale profile.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperOverrides {
    pub train_size: Option<usize>,
    pub test_size: Option<usize>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub epsilon: Option<f64>,
    pub margin: Option<f64>,
    pub dropout: Option<f64>,
    pub objective: Option<ObjectiveMode>,
    pub sampling: Option<DirectionSampling>,
}

impl HyperOverrides {
    fn apply(&self, mut h: Hyper) -> Hyper {
        macro_rules! take {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { h.$f = v; })* };
        }
        take!(
            train_size,
            test_size,
            batch_size,
            epochs,
            learning_rate,
            epsilon,
            margin,
            dropout,
            objective,
            sampling
        );
        h
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnnSettings {
    pub conv_layers: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub pool_size: usize,
    pub pool_stride: usize,
    pub proj_dim: usize,
    /// Widths of the trailing fully connected layers (the last is the head).
    pub dense: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CnnOverrides {
    pub conv_layers: Option<usize>,
    pub kernel: Option<usize>,
    pub stride: Option<usize>,
    pub padding: Option<usize>,
    pub pool_size: Option<usize>,
    pub pool_stride: Option<usize>,
    pub proj_dim: Option<usize>,
    pub dense: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhotonicSettings {
    pub ports: usize,
    pub downsample: usize,
    pub classes: usize,
    pub normalize_input: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhotonicOverrides {
    pub ports: Option<usize>,
    pub downsample: Option<usize>,
    pub classes: Option<usize>,
    pub normalize_input: Option<bool>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    /// Hidden layers (MLP), conv layers are fixed by `[cnn]`; mesh stages
    /// (photonic).
    #[serde(default)]
    pub depths: Vec<usize>,
    #[serde(default)]
    pub widths: Vec<usize>,
    /// Conv channels per conv layer.
    #[serde(default)]
    pub channels: Vec<usize>,
    /// Directions per step (P).
    #[serde(default)]
    pub directions: Vec<usize>,
}

/// A sweep read from a TOML plan file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub name: String,
    pub dataset: DatasetId,
    pub arch: Arch,
    #[serde(default)]
    pub scale: Scale,
    pub regimes: Vec<Regime>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Save a checkpoint for every finished cell.
    #[serde(default)]
    pub checkpoints: bool,
    #[serde(default)]
    pub sweep: Sweep,
    #[serde(default)]
    pub train: HyperOverrides,
    #[serde(default)]
    pub cnn: CnnOverrides,
    #[serde(default)]
    pub photonic: PhotonicOverrides,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl ExperimentPlan {
    pub fn new(name: &str, dataset: DatasetId, arch: Arch, regimes: &[Regime]) -> Self {
        Self {
            name: name.into(),
            dataset,
            arch,
            scale: Scale::Desk,
            regimes: regimes.to_vec(),
            seeds: default_seeds(),
            out: None,
            checkpoints: false,
            sweep: Sweep::default(),
            train: HyperOverrides::default(),
            cnn: CnnOverrides::default(),
            photonic: PhotonicOverrides::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let plan: ExperimentPlan = toml::from_str(text)?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::invalid("plan name is empty"));
        }
        if self.dataset.is_regression() && self.arch == Arch::Photonic {
            return Err(Error::invalid("photonic plans are classification only"));
        }
        if !self.dataset.is_image() && self.arch != Arch::Mlp {
            return Err(Error::invalid(format!(
                "{} needs an mlp",
                self.dataset.as_str()
            )));
        }
        for r in &self.regimes {
            match (self.arch, r) {
                (Arch::Cnn, Regime::FfAd | Regime::BpAd) => {
                    return Err(Error::invalid(format!(
                        "{r} is not available for cnn plans"
                    )))
                }
                (Arch::Photonic, Regime::FfAd | Regime::BpAd) => {
                    return Err(Error::invalid(format!(
                        "{r} is not available for photonic plans"
                    )))
                }
                _ => {}
            }
        }
        let positive = |name: &str, v: &[usize]| {
            if v.contains(&0) {
                Err(Error::invalid(format!("sweep.{name} must be positive")))
            } else {
                Ok(())
            }
        };
        positive("depths", &self.sweep.depths)?;
        positive("widths", &self.sweep.widths)?;
        positive("channels", &self.sweep.channels)?;
        positive("directions", &self.sweep.directions)?;
        for c in self.cells()? {
            c.run_config().validate_scalars()?;
        }
        Ok(())
    }

    /// Training knobs for this plan's dataset, architecture and scale.
    pub fn hyper(&self) -> Hyper {
        self.train
            .apply(profile(self.dataset, self.arch, self.scale))
    }

    pub fn cnn_settings(&self) -> CnnSettings {
        let mut s = CnnSettings {
            conv_layers: 2,
            kernel: 6,
            stride: 1,
            padding: 2,
            pool_size: 2,
            pool_stride: 2,
            proj_dim: 10,
            dense: match (self.dataset, self.dataset.is_regression()) {
                (_, true) => vec![1],
                (DatasetId::FashionMnist, _) => vec![100, 10],
                _ => vec![10],
            },
        };
        let o = &self.cnn;
        macro_rules! take {
            ($($f:ident),*) => { $(if let Some(v) = o.$f { s.$f = v; })* };
        }
        take!(
            conv_layers,
            kernel,
            stride,
            padding,
            pool_size,
            pool_stride,
            proj_dim
        );
        if let Some(d) = &o.dense {
            s.dense = d.clone();
        }
        s
    }

    pub fn photonic_settings(&self) -> PhotonicSettings {
        let mut s = match self.scale {
            Scale::Desk => PhotonicSettings {
                ports: 16,
                downsample: 7,
                classes: 3,
                normalize_input: true,
            },
            Scale::Paper => PhotonicSettings {
                ports: 784,
                downsample: 1,
                classes: 10,
                normalize_input: true,
            },
        };
        let o = &self.photonic;
        if let Some(v) = o.ports {
            s.ports = v;
        }
        if let Some(v) = o.downsample {
            s.downsample = v;
        }
        if let Some(v) = o.classes {
            s.classes = v;
        }
        if let Some(v) = o.normalize_input {
            s.normalize_input = v;
        }
        s
    }

    fn axis(&self, given: &[usize], default: usize) -> Vec<usize> {
        if given.is_empty() {
            vec![default]
        } else {
            given.to_vec()
        }
    }

    /// Every (depth × width × P × regime × seed) cell, fully resolved.
    pub fn cells(&self) -> Result<Vec<CellConfig>> {
        let hyper = self.hyper();
        let (depths, widths) = match self.arch {
            Arch::Mlp => (
                self.axis(
                    &self.sweep.depths,
                    if self.dataset.is_regression() && !self.dataset.is_image() {
                        2
                    } else {
                        1
                    },
                ),
                self.axis(
                    &self.sweep.widths,
                    if self.dataset.is_image() { 100 } else { 50 },
                ),
            ),
            Arch::Cnn => (
                vec![self.cnn_settings().conv_layers],
                self.axis(&self.sweep.channels, 4),
            ),
            Arch::Photonic => (
                self.axis(&self.sweep.depths, 2),
                vec![self.photonic_settings().ports],
            ),
        };
        let directions = self.axis(&self.sweep.directions, 1);
        let cnn = (self.arch == Arch::Cnn).then(|| self.cnn_settings());
        let photonic = (self.arch == Arch::Photonic).then(|| self.photonic_settings());
        let mut cells = Vec::new();
        for &depth in &depths {
            for &width in &widths {
                for &p in &directions {
                    for &regime in &self.regimes {
                        for &seed in &self.seeds {
                            cells.push(CellConfig {
                                dataset: self.dataset,
                                arch: self.arch,
                                scale: self.scale,
                                depth,
                                width,
                                regime,
                                directions: p,
                                seed,
                                hyper: hyper.clone(),
                                cnn: cnn.clone(),
                                photonic: photonic.clone(),
                            });
                        }
                    }
                }
            }
        }
        Ok(cells)
    }
}

/// Published hyperparameters at paper scale; shorter, smaller runs at desk scale.
pub fn profile(dataset: DatasetId, arch: Arch, scale: Scale) -> Hyper {
    let paper = Hyper {
        train_size: 50_000,
        test_size: 10_000,
        batch_size: 256,
        epochs: 100,
        learning_rate: 1e-3,
        epsilon: 1e-3,
        margin: 0.3,
        dropout: if dataset == DatasetId::FashionMnist && arch == Arch::Cnn {
            0.1
        } else {
            0.0
        },
        objective: ObjectiveMode::Margin,
        sampling: DirectionSampling::Gaussian,
    };
    let paper = match (dataset.is_image(), arch) {
        (_, Arch::Photonic) => Hyper {
            train_size: 60_000,
            test_size: 10_000,
            batch_size: 128,
            ..paper
        },
        (false, _) => Hyper {
            train_size: 10_000,
            test_size: 2_000,
            ..paper
        },
        _ => paper,
    };
    if scale == Scale::Paper {
        return paper;
    }
    match (dataset.is_image(), arch) {
        (_, Arch::Photonic) => Hyper {
            train_size: 600,
            test_size: 600,
            batch_size: 32,
            epochs: 30,
            learning_rate: 1e-2,
            ..paper
        },
        (true, Arch::Cnn) => Hyper {
            train_size: 2000,
            test_size: 1000,
            epochs: 5,
            learning_rate: 5e-3,
            ..paper
        },
        (true, _) => Hyper {
            train_size: 8000,
            test_size: 2000,
            epochs: 20,
            learning_rate: 5e-3,
            ..paper
        },
        (false, _) => Hyper {
            epochs: 20,
            learning_rate: 5e-2,
            ..paper
        },
    }
}

/// One fully resolved sweep point. Its hash identifies the cell on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellConfig {
    pub dataset: DatasetId,
    pub arch: Arch,
    pub scale: Scale,
    /// Hidden layers, conv layers or mesh stages.
    pub depth: usize,
    /// Hidden width, conv channels or mesh ports.
    pub width: usize,
    pub regime: Regime,
    pub directions: usize,
    pub seed: u64,
    pub hyper: Hyper,
    pub cnn: Option<CnnSettings>,
    pub photonic: Option<PhotonicSettings>,
}

impl CellConfig {
    /// Hex sha256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("cell config serializes");
        let mut h = Sha256::new();
        h.update(b"ffzero-cell-v1\n");
        h.update(&json);
        hex::encode(h.finalize())
    }

    pub fn data_request(&self) -> DataRequest {
        let (downsample, classes) = match &self.photonic {
            Some(p) => (p.downsample, Some(p.classes)),
            None => (1, None),
        };
        DataRequest {
            dataset: self.dataset,
            train_size: self.hyper.train_size,
            test_size: self.hyper.test_size,
            paper_scale: self.scale == Scale::Paper,
            downsample,
            classes,
        }
    }

    pub fn run_config(&self) -> RunConfig {
        let h = &self.hyper;
        let mut cfg = RunConfig::new(self.regime);
        cfg.learning_rate = h.learning_rate;
        cfg.epsilon = h.epsilon;
        cfg.directions = self.directions;
        cfg.margin = h.margin;
        cfg.objective = h.objective;
        cfg.batch_size = h.batch_size;
        cfg.epochs = h.epochs;
        cfg.seed = self.seed;
        cfg.sampling = h.sampling;
        cfg
    }

    fn task(&self) -> TaskKind {
        if self.dataset.is_regression() {
            TaskKind::Regression
        } else {
            TaskKind::Classification { classes: 10 }
        }
    }

    /// Model architecture for MLP and CNN cells, given the data shape.
    pub fn model_spec(&self, input: TensorShape) -> Result<ModelSpec> {
        let task = self.task();
        match self.arch {
            Arch::Mlp => {
                let hidden = vec![self.width; self.depth];
                let head = match (task, self.regime.is_layer_local()) {
                    (TaskKind::Classification { classes }, _) => Some(classes),
                    (TaskKind::Regression, false) => Some(1),
                    (TaskKind::Regression, true) => None,
                };
                Ok(ModelSpec::mlp(input.len(), &hidden, head, task))
            }
            Arch::Cnn => {
                let c = self
                    .cnn
                    .as_ref()
                    .ok_or_else(|| Error::invalid("cnn cell without [cnn] settings"))?;
                let geometry = ConvGeometry::square(c.kernel, c.stride, c.padding);
                let convs = vec![(self.width, geometry); c.conv_layers];
                let pool = (c.pool_size > 1).then_some(MaxPool {
                    size: c.pool_size,
                    stride: c.pool_stride,
                });
                Ok(ModelSpec::cnn(
                    input,
                    &convs,
                    c.proj_dim,
                    pool,
                    &c.dense,
                    self.hyper.dropout,
                    task,
                ))
            }
            Arch::Photonic => Err(Error::invalid("photonic cells have no dense model spec")),
        }
    }

    pub fn photonic_spec(&self) -> Result<PhotonicSpec> {
        let p = self
            .photonic
            .as_ref()
            .ok_or_else(|| Error::invalid("photonic cell without settings"))?;
        let mut spec = PhotonicSpec::new(p.ports, self.depth, p.classes);
        spec.normalize_input = p.normalize_input;
        Ok(spec)
    }
}

impl RunConfig {
    /// Checks that do not need a model.
    pub(crate) fn validate_scalars(&self) -> Result<()> {
        if self.batch_size == 0 || self.directions == 0 {
            return Err(Error::invalid("batch size and directions must be positive"));
        }
        if !(self.learning_rate.is_finite() && self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid(
                "learning rate must be finite and epsilon positive",
            ));
        }
        Ok(())
    }
}
