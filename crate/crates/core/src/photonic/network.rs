use std::path::Path;
use std::time::Instant;

use ndarray::{s, Array2, ArrayView2, Axis};
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{apply_field_activation, encode_batch, intensity_batch, EoActivation, MziMesh};
use crate::data::{DatasetSplit, Targets};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::goodness::{class_goodness, UnitTarget};
use crate::inference::{accuracy, argmax, resolve_votes, ClassPrediction, Metric, MetricKind};
use crate::loss::cross_entropy_loss;
use crate::nn::ActivationBox;
use crate::prototype::PrototypeSet;
use crate::rng::{stream, Stream};
use crate::train::{epoch_batches, EpochRecord, Regime, RunConfig, TrainLog};
use crate::zoo::{dd_step_with, CountingObjective, ParameterView};

const CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhotonicSpec {
    pub ports: usize,
    pub layers: usize,
    pub classes: usize,
    /// Scale every encoded image to unit norm.
    pub normalize_input: bool,
    /// Applied between meshes, never after the last one.
    pub activation: ActivationBox,
}

impl PhotonicSpec {
    pub fn new(ports: usize, layers: usize, classes: usize) -> Self {
        Self {
            ports,
            layers,
            classes,
            normalize_input: true,
            activation: ActivationBox::new(EoActivation::default()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::invalid("a photonic network needs at least one mesh"));
        }
        if self.ports < 2 {
            return Err(Error::invalid("a mesh needs at least two ports"));
        }
        if self.classes < 2 || self.classes > self.ports {
            return Err(Error::invalid(format!(
                "{} classes do not fit {} ports",
                self.classes, self.ports
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layers * 3 * self.ports * (self.ports - 1) / 2
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhotonicNetwork {
    pub spec: PhotonicSpec,
    pub meshes: Vec<MziMesh>,
}

impl PhotonicNetwork {
    pub fn random<R: Rng + ?Sized>(spec: PhotonicSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let meshes = (0..spec.layers)
            .map(|_| MziMesh::random(spec.ports, rng))
            .collect::<Result<_>>()?;
        Ok(Self { spec, meshes })
    }

    pub fn param_count(&self) -> usize {
        self.meshes.iter().map(MziMesh::param_count).sum()
    }

    pub fn phases(&self) -> Vec<f64> {
        self.meshes.iter().flat_map(MziMesh::phases).collect()
    }

    pub fn set_phases(&mut self, phases: &[f64]) -> Result<()> {
        crate::error::check_dim(self.param_count(), phases.len(), "network phases")?;
        let mut rest = phases;
        for m in &mut self.meshes {
            let (head, tail) = rest.split_at(m.param_count());
            m.set_phases(head)?;
            rest = tail;
        }
        Ok(())
    }

    pub fn encode(&self, x: ArrayView2<'_, f64>) -> Result<Array2<Complex64>> {
        crate::error::check_dim(self.spec.ports, x.ncols(), "image pixels vs ports")?;
        Ok(encode_batch(x, self.spec.normalize_input))
    }

    /// Output intensities of every mesh.
    pub fn taps(&self, x: ArrayView2<'_, f64>) -> Result<Vec<Array2<f64>>> {
        let mut field = self.encode(x)?;
        let mut out = Vec::with_capacity(self.meshes.len());
        for (k, mesh) in self.meshes.iter().enumerate() {
            field = mesh.forward_batch(field.view())?;
            out.push(intensity_batch(field.view()));
            if k + 1 < self.meshes.len() {
                apply_field_activation(&self.spec.activation, &mut field);
            }
        }
        Ok(out)
    }

    /// Intensities of the first `classes` ports of the last mesh, used as
    /// logits by the global baseline.
    fn logits_with(
        &self,
        phases: &[f64],
        fields: ArrayView2<'_, Complex64>,
    ) -> Result<Array2<f64>> {
        let mut field = fields.to_owned();
        let mut rest = phases;
        for (k, mesh) in self.meshes.iter().enumerate() {
            let (head, tail) = rest.split_at(mesh.param_count());
            rest = tail;
            field = mesh.forward_batch_with(&mesh.transfers_from(head)?, field.view())?;
            if k + 1 < self.meshes.len() {
                apply_field_activation(&self.spec.activation, &mut field);
            }
        }
        Ok(intensity_batch(field.slice(s![.., ..self.spec.classes])))
    }

    /// Classes from the largest of the first `classes` output intensities.
    pub fn predict_global(&self, x: ArrayView2<'_, f64>, exec: Execution) -> Result<Vec<usize>> {
        let phases = self.phases();
        let chunks = exec.map_chunks(x.nrows(), CHUNK, |r| {
            let fields = self.encode(x.slice(s![r, ..]))?;
            let logits = self.logits_with(&phases, fields.view())?;
            Ok(logits
                .rows()
                .into_iter()
                .map(|row| argmax(&row.to_vec()))
                .collect::<Vec<_>>())
        });
        flatten(chunks)
    }
}

fn flatten<T>(chunks: Vec<Result<Vec<T>>>) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// A network trained layer by layer, with one prototype set per mesh.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhotonicFf {
    pub network: PhotonicNetwork,
    pub prototypes: Vec<PrototypeSet>,
}

impl PhotonicFf {
    pub fn new(network: PhotonicNetwork, prototypes: Vec<PrototypeSet>) -> Result<Self> {
        crate::error::check_dim(
            network.meshes.len(),
            prototypes.len(),
            "prototype sets vs meshes",
        )?;
        for p in &prototypes {
            crate::error::check_dim(network.spec.ports, p.dim(), "prototype dimension vs ports")?;
            crate::error::check_dim(network.spec.classes, p.num_classes(), "prototype classes")?;
        }
        Ok(Self {
            network,
            prototypes,
        })
    }

    pub fn random_prototypes<R: Rng + ?Sized>(
        spec: &PhotonicSpec,
        rng: &mut R,
    ) -> Result<Vec<PrototypeSet>> {
        (0..spec.layers)
            .map(|_| PrototypeSet::random(spec.classes, spec.ports, rng))
            .collect()
    }

    /// Majority vote over the first `layers` meshes.
    pub fn predict(
        &self,
        x: ArrayView2<'_, f64>,
        layers: Option<usize>,
        exec: Execution,
    ) -> Result<Vec<ClassPrediction>> {
        let layers = layers.unwrap_or(usize::MAX).min(self.prototypes.len());
        if layers == 0 {
            return Err(Error::invalid("no voting layers"));
        }
        let classes = self.network.spec.classes;
        let chunks = exec.map_chunks(x.nrows(), CHUNK, |r| {
            let taps = self.network.taps(x.slice(s![r, ..]))?;
            let mut g = vec![0.0; classes];
            (0..taps[0].nrows())
                .map(|i| {
                    let mut votes = Vec::with_capacity(layers);
                    for (tap, set) in taps.iter().zip(&self.prototypes).take(layers) {
                        class_goodness(tap.row(i), set, &mut g);
                        votes.push(argmax(&g));
                    }
                    let class = resolve_votes(&votes, &g)?;
                    Ok(ClassPrediction {
                        votes,
                        class,
                        last_goodness: g.clone(),
                    })
                })
                .collect::<Result<Vec<_>>>()
        });
        flatten(chunks)
    }

    /// Per-mesh output intensities for embedding export.
    pub fn embeddings(&self, x: ArrayView2<'_, f64>) -> Result<Vec<Array2<f64>>> {
        self.network.taps(x)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        let text = serde_json::to_string_pretty(&PhotonicFile {
            format: FORMAT.into(),
            model: self.clone(),
        })?;
        std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: PhotonicFile = serde_json::from_str(&text)?;
        if file.format != FORMAT {
            return Err(Error::Format(format!(
                "not a photonic checkpoint: `{}`",
                file.format
            )));
        }
        Self::new(file.model.network, file.model.prototypes)
    }
}

const FORMAT: &str = "ffzero-photonic";

#[derive(Serialize, Deserialize)]
struct PhotonicFile {
    format: String,
    model: PhotonicFf,
}

#[derive(Clone, Debug, PartialEq)]
pub enum PhotonicTrained {
    Ff(PhotonicFf),
    Global(PhotonicNetwork),
}

impl PhotonicTrained {
    pub fn classify(&self, x: ArrayView2<'_, f64>, exec: Execution) -> Result<Vec<usize>> {
        match self {
            PhotonicTrained::Ff(ff) => Ok(ff
                .predict(x, None, exec)?
                .into_iter()
                .map(|p| p.class)
                .collect()),
            PhotonicTrained::Global(n) => n.predict_global(x, exec),
        }
    }

    pub fn evaluate(&self, data: &DatasetSplit, exec: Execution) -> Result<Metric> {
        let labels = class_labels(data)?;
        Ok(Metric {
            kind: MetricKind::Accuracy,
            value: accuracy(&self.classify(data.inputs.view(), exec)?, labels)?,
        })
    }
}

fn class_labels(data: &DatasetSplit) -> Result<&[usize]> {
    data.targets
        .labels()
        .ok_or_else(|| Error::invalid("photonic networks only classify"))
}

fn check_data(spec: &PhotonicSpec, data: &DatasetSplit) -> Result<()> {
    match &data.targets {
        Targets::Classes { num_classes, .. } if *num_classes <= spec.classes => {}
        _ => {
            return Err(Error::invalid(
                "dataset labels do not fit the network's classes",
            ))
        }
    }
    crate::error::check_dim(spec.ports, data.inputs.ncols(), "image pixels vs ports")
}

fn check_regime(cfg: &RunConfig, want: Regime) -> Result<()> {
    if cfg.regime != want {
        return Err(Error::Unsupported(format!(
            "photonic meshes train with {want} here, not {}",
            cfg.regime
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    cfg.dd().validate()?;
    cfg.objective_config().validate()
}

/// Train mesh after mesh on the goodness of its output intensities. Only
/// forward evaluations of the activation are used.
pub fn train_photonic_ff(
    network: PhotonicNetwork,
    prototypes: Vec<PrototypeSet>,
    data: &DatasetSplit,
    cfg: &RunConfig,
    eval: Option<&DatasetSplit>,
    rng: &mut crate::rng::Rng,
) -> Result<(PhotonicFf, TrainLog)> {
    check_regime(cfg, Regime::FfDd)?;
    check_data(&network.spec, data)?;
    let mut ff = PhotonicFf::new(network, prototypes)?;
    let labels = class_labels(data)?;
    let objective = cfg.objective_config();
    let dd = cfg.dd();
    let layers = ff.network.meshes.len();
    let mut log = TrainLog {
        epochs_per_unit: cfg.epochs,
        total_unit_epochs: cfg.epochs * layers,
        ..Default::default()
    };
    let start = Instant::now();
    let mut fields = ff.network.encode(data.inputs.view())?;
    for k in 0..layers {
        for epoch in 0..cfg.epochs {
            let (mut total, mut batches) = (0.0, 0);
            for idx in epoch_batches(data.len(), cfg.batch_size, rng) {
                let fb = fields.select(Axis(0), &idx);
                let yb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
                let target = UnitTarget::Classification {
                    labels: &yb,
                    prototypes: &ff.prototypes[k],
                    objective: &objective,
                };
                let mesh = &ff.network.meshes[k];
                let f = CountingObjective::new(|p: &[f64]| {
                    mesh.transfers_from(p)
                        .and_then(|t| mesh.forward_batch_with(&t, fb.view()))
                        .map_or(f64::NAN, |out| {
                            target.batch_objective(intensity_batch(out.view()).view())
                        })
                });
                let mut view = ParameterView::new(mesh.phases())?;
                let v = dd_step_with(&f, &mut view, &dd, rng, cfg.exec);
                log.evaluations += f.calls();
                total += v?;
                batches += 1;
                ff.network.meshes[k].set_phases(view.as_slice())?;
            }
            log.records.push(EpochRecord {
                epoch,
                unit_id: format!("m{k}"),
                objective: total / batches.max(1) as f64,
                metric: None,
                eval_count: log.evaluations,
                seconds: start.elapsed().as_secs_f64(),
            });
        }
        if let Some(eval) = eval {
            let preds = ff.predict(eval.inputs.view(), Some(k + 1), cfg.exec)?;
            let classes: Vec<usize> = preds.into_iter().map(|p| p.class).collect();
            let m = accuracy(&classes, class_labels(eval)?)?;
            if let Some(r) = log.records.last_mut() {
                r.metric = Some(m);
            }
        }
        if k + 1 < layers {
            fields = ff.network.meshes[k].forward_batch(fields.view())?;
            apply_field_activation(&ff.network.spec.activation, &mut fields);
        }
    }
    debug_assert_eq!(fields.nrows(), data.len());
    Ok((ff, log))
}

/// End-to-end baseline: cross-entropy on the first `classes` output
/// intensities, every phase perturbed at once.
pub fn train_photonic_bp_dd(
    mut network: PhotonicNetwork,
    data: &DatasetSplit,
    cfg: &RunConfig,
    eval: Option<&DatasetSplit>,
    rng: &mut crate::rng::Rng,
) -> Result<(PhotonicNetwork, TrainLog)> {
    check_regime(cfg, Regime::BpDd)?;
    check_data(&network.spec, data)?;
    let labels = class_labels(data)?;
    let dd = cfg.dd();
    let mut log = TrainLog {
        epochs_per_unit: cfg.epochs,
        total_unit_epochs: cfg.epochs,
        ..Default::default()
    };
    let start = Instant::now();
    let fields = network.encode(data.inputs.view())?;
    for epoch in 0..cfg.epochs {
        let (mut total, mut batches) = (0.0, 0);
        for idx in epoch_batches(data.len(), cfg.batch_size, rng) {
            let fb = fields.select(Axis(0), &idx);
            let yb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let net = &network;
            let f = CountingObjective::new(|p: &[f64]| {
                net.logits_with(p, fb.view())
                    .and_then(|l| cross_entropy_loss(l.view(), &yb))
                    .map_or(f64::NAN, |l| -l)
            });
            let mut view = ParameterView::new(network.phases())?;
            let v = dd_step_with(&f, &mut view, &dd, rng, cfg.exec);
            log.evaluations += f.calls();
            total += v?;
            batches += 1;
            network.set_phases(view.as_slice())?;
        }
        let metric = match eval {
            Some(e) => Some(accuracy(
                &network.predict_global(e.inputs.view(), cfg.exec)?,
                class_labels(e)?,
            )?),
            None => None,
        };
        log.records.push(EpochRecord {
            epoch,
            unit_id: "global".into(),
            objective: total / batches.max(1) as f64,
            metric,
            eval_count: log.evaluations,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok((network, log))
}

#[derive(Clone, Debug)]
pub struct PhotonicOutcome {
    pub trained: PhotonicTrained,
    pub log: TrainLog,
    pub metric: Metric,
    pub param_count: usize,
}

/// Seeded end-to-end run: phases from the init stream, prototypes from the
/// prototype stream, batches and directions from the training stream.
pub fn run_photonic(
    spec: &PhotonicSpec,
    cfg: &RunConfig,
    train: &DatasetSplit,
    test: &DatasetSplit,
) -> Result<PhotonicOutcome> {
    spec.validate()?;
    check_data(spec, test)?;
    let network = PhotonicNetwork::random(spec.clone(), &mut stream(cfg.seed, Stream::Init))?;
    let param_count = network.param_count();
    let mut rng = stream(cfg.seed, Stream::Training);
    let (trained, log) = match cfg.regime {
        Regime::FfDd => {
            let protos =
                PhotonicFf::random_prototypes(spec, &mut stream(cfg.seed, Stream::Prototypes))?;
            let (ff, log) = train_photonic_ff(network, protos, train, cfg, Some(test), &mut rng)?;
            (PhotonicTrained::Ff(ff), log)
        }
        Regime::BpDd => {
            let (n, log) = train_photonic_bp_dd(network, train, cfg, Some(test), &mut rng)?;
            (PhotonicTrained::Global(n), log)
        }
        other => {
            return Err(Error::Unsupported(format!(
                "{other} is not available for photonic meshes"
            )))
        }
    };
    let metric = trained.evaluate(test, cfg.exec)?;
    Ok(PhotonicOutcome {
        trained,
        log,
        metric,
        param_count,
    })
}
