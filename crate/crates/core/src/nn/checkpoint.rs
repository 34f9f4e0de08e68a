use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{init_parameters, Model, ModelSpec};
use crate::error::{check_dim, Error, Result};
use crate::prototype::TapPrototypes;
use crate::rng::seeded;

pub const CHECKPOINT_FORMAT: &str = "ffzero-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Self-contained JSON snapshot of a model.
///
/// `parameters` is the flat vector of [`Model::parameters`]; `projections`
/// lists the frozen conv projections in stage then channel order;
/// `prototypes` holds one entry per training unit for layer-locally trained
/// models and is empty otherwise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    #[serde(default)]
    pub regime: Option<String>,
    pub spec: ModelSpec,
    pub parameters: Vec<f64>,
    pub projections: Vec<Array2<f64>>,
    #[serde(default)]
    pub prototypes: Vec<TapPrototypes>,
}

impl Checkpoint {
    pub fn new(
        model: &Model,
        seed: u64,
        regime: Option<&str>,
        prototypes: Vec<TapPrototypes>,
    ) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            seed,
            regime: regime.map(str::to_string),
            spec: model.spec().clone(),
            parameters: model.parameters(),
            projections: model
                .projections()
                .into_iter()
                .map(|p| p.matrix().clone())
                .collect(),
            prototypes,
        }
    }

    /// Rebuild the model exactly.
    pub fn model(&self) -> Result<Model> {
        let mut model = init_parameters(&self.spec, &mut seeded(self.seed))?;
        model.set_parameters(&self.parameters)?;
        let mut slots = model.projections_mut();
        check_dim(
            slots.len(),
            self.projections.len(),
            "checkpoint projections",
        )?;
        for (slot, m) in slots.iter_mut().zip(&self.projections) {
            if slot.matrix().dim() != m.dim() {
                return Err(Error::Format("projection shape mismatch".into()));
            }
            **slot = super::RandomProjection::new(m.clone());
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec(self)?;
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&json).map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_slice(&bytes)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!(
                "not a checkpoint: format `{}`",
                ck.format
            )));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {}",
                ck.version
            )));
        }
        Ok(ck)
    }
}
