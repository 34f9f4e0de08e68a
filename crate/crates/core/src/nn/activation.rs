use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, OnceLock, RwLock};

use ndarray::Array2;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// A nonlinearity applied to one sample's feature vector.
///
/// The map may couple features (e.g. complex modes packed as re/im pairs).
/// Forward-forward and directional-derivative training only ever call
/// [`ActivationFn::apply`]; `derivative` exists for the exact-gradient
/// baselines and may be left unimplemented.
pub trait ActivationFn: Send + Sync {
    fn name(&self) -> &str;

    fn apply(&self, x: &mut [f64]);

    /// Elementwise derivative at pre-activation `z`, if the map is
    /// elementwise and differentiable.
    fn derivative(&self, _z: &[f64]) -> Option<Vec<f64>> {
        None
    }
}

#[derive(Debug)]
struct Relu;

impl ActivationFn for Relu {
    fn name(&self) -> &str {
        "relu"
    }

    fn apply(&self, x: &mut [f64]) {
        for v in x {
            *v = v.max(0.0);
        }
    }

    fn derivative(&self, z: &[f64]) -> Option<Vec<f64>> {
        Some(z.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect())
    }
}

#[derive(Debug)]
struct Identity;

impl ActivationFn for Identity {
    fn name(&self) -> &str {
        "identity"
    }

    fn apply(&self, _x: &mut [f64]) {}

    fn derivative(&self, z: &[f64]) -> Option<Vec<f64>> {
        Some(vec![1.0; z.len()])
    }
}

#[derive(Debug)]
struct Tanh;

impl ActivationFn for Tanh {
    fn name(&self) -> &str {
        "tanh"
    }

    fn apply(&self, x: &mut [f64]) {
        for v in x {
            *v = v.tanh();
        }
    }

    fn derivative(&self, z: &[f64]) -> Option<Vec<f64>> {
        Some(z.iter().map(|v| 1.0 - v.tanh().powi(2)).collect())
    }
}

/// Shared handle to an activation. Serialized by name; deserialization
/// resolves the name through the registry.
#[derive(Clone)]
pub struct ActivationBox(Arc<dyn ActivationFn>);

impl ActivationBox {
    pub fn new<A: ActivationFn + 'static>(f: A) -> Self {
        Self(Arc::new(f))
    }

    pub fn relu() -> Self {
        Self::new(Relu)
    }

    pub fn identity() -> Self {
        Self::new(Identity)
    }

    pub fn name(&self) -> &str {
        self.0.name()
    }

    pub fn apply(&self, x: &mut [f64]) {
        self.0.apply(x)
    }

    pub fn derivative(&self, z: &[f64]) -> Option<Vec<f64>> {
        self.0.derivative(z)
    }

    /// Apply to every row of a batch.
    pub fn apply_batch(&self, x: &mut Array2<f64>) {
        if self.name() == "relu" {
            x.mapv_inplace(|v| v.max(0.0));
            return;
        }
        for mut row in x.rows_mut() {
            match row.as_slice_mut() {
                Some(s) => self.0.apply(s),
                None => {
                    let mut tmp = row.to_vec();
                    self.0.apply(&mut tmp);
                    row.assign(&ndarray::ArrayView1::from(&tmp));
                }
            }
        }
    }

    /// Look up a registered activation by name.
    pub fn by_name(name: &str) -> Result<Self> {
        registry()
            .read()
            .expect("activation registry poisoned")
            .get(name)
            .cloned()
            .ok_or_else(|| Error::Unsupported(format!("unknown activation `{name}`")))
    }
}

impl Default for ActivationBox {
    fn default() -> Self {
        Self::relu()
    }
}

impl fmt::Debug for ActivationBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ActivationBox({})", self.name())
    }
}

impl PartialEq for ActivationBox {
    fn eq(&self, other: &Self) -> bool {
        self.name() == other.name()
    }
}

impl Serialize for ActivationBox {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for ActivationBox {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let name = String::deserialize(d)?;
        ActivationBox::by_name(&name).map_err(serde::de::Error::custom)
    }
}

fn registry() -> &'static RwLock<HashMap<String, ActivationBox>> {
    static REGISTRY: OnceLock<RwLock<HashMap<String, ActivationBox>>> = OnceLock::new();
    REGISTRY.get_or_init(|| {
        let builtins = [
            ActivationBox::relu(),
            ActivationBox::identity(),
            ActivationBox::new(Tanh),
            ActivationBox::new(crate::photonic::EoActivation::default()),
        ];
        RwLock::new(
            builtins
                .into_iter()
                .map(|a| (a.name().to_string(), a))
                .collect(),
        )
    })
}

/// Make a custom activation available to model specs and checkpoints by
/// its name. Replaces any previous registration under the same name.
pub fn register_activation(activation: ActivationBox) {
    registry()
        .write()
        .expect("activation registry poisoned")
        .insert(activation.name().to_string(), activation);
}
