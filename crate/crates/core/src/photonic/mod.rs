//! Emulated photonic layers: rectangular Mach-Zehnder meshes with
//! intensity readout and an opaque electro-optic style nonlinearity.
//!
//! Complex fields are `batch x d` arrays of [`Complex64`]. Wherever a field
//! has to pass through an [`ActivationFn`] it is packed as interleaved
//! `re, im` pairs.

mod network;

pub use network::{
    run_photonic, train_photonic_bp_dd, train_photonic_ff, PhotonicFf, PhotonicNetwork,
    PhotonicOutcome, PhotonicSpec, PhotonicTrained,
};

use std::f64::consts::{PI, TAU};
use std::io::{Read, Write};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::nn::{ActivationBox, ActivationFn};

pub type Transfer = [[Complex64; 2]; 2];

/// One 2x2 interferometer cell.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MziCell {
    pub theta: f64,
    pub phi: f64,
    pub gamma: f64,
}

/// Fold `theta` into `[0, pi]` by reflection.
pub fn wrap_theta(theta: f64) -> f64 {
    let m = theta.rem_euclid(TAU);
    if m > PI {
        TAU - m
    } else {
        m
    }
}

/// Wrap a phase into `[0, 2pi)`.
pub fn wrap_phase(phase: f64) -> f64 {
    let m = phase.rem_euclid(TAU);
    if m >= TAU {
        0.0
    } else {
        m
    }
}

impl MziCell {
    pub fn new(theta: f64, phi: f64, gamma: f64) -> Self {
        Self { theta, phi, gamma }.wrapped()
    }

    pub fn wrapped(self) -> Self {
        Self {
            theta: wrap_theta(self.theta),
            phi: wrap_phase(self.phi),
            gamma: wrap_phase(self.gamma),
        }
    }

    /// `B P(theta) B P(phi) G(gamma)` with `B = [[1, i], [i, 1]] / sqrt 2`,
    /// `P(a) = G(a) = diag(e^{ia}, 1)`.
    pub fn transfer(&self) -> Transfer {
        transfer(self.theta, self.phi, self.gamma)
    }
}

fn transfer(theta: f64, phi: f64, gamma: f64) -> Transfer {
    let i = Complex64::i();
    let one = Complex64::new(1.0, 0.0);
    let e = Complex64::from_polar(1.0, theta);
    let f = Complex64::from_polar(1.0, phi + gamma);
    [
        [0.5 * (e - one) * f, 0.5 * i * (e + one)],
        [0.5 * i * (e + one) * f, 0.5 * (one - e)],
    ]
}

/// Rectangular mesh on `d` ports. Column `c` holds cells on port pairs
/// `(i, i + 1)` for `i = c % 2, c % 2 + 2, ...`; there are `d` columns and
/// `d (d - 1) / 2` cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MziMesh {
    ports: usize,
    cells: Vec<MziCell>,
}

/// Position of a cell: column (diagonal) and index within the column.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellPosition {
    pub diag: usize,
    pub cell: usize,
    /// Upper port of the pair.
    pub port: usize,
}

pub fn rectangular_layout(ports: usize) -> Vec<CellPosition> {
    let mut out = Vec::with_capacity(ports * ports.saturating_sub(1) / 2);
    for diag in 0..ports {
        for (cell, port) in (diag % 2..ports.saturating_sub(1)).step_by(2).enumerate() {
            out.push(CellPosition { diag, cell, port });
        }
    }
    out
}

impl MziMesh {
    /// All phases zero.
    pub fn zeros(ports: usize) -> Result<Self> {
        if ports < 2 {
            return Err(Error::invalid("a mesh needs at least two ports"));
        }
        Ok(Self {
            ports,
            cells: vec![MziCell::default(); ports * (ports - 1) / 2],
        })
    }

    /// `theta ~ U[0, pi]`, `phi, gamma ~ U[0, 2pi)`.
    pub fn random<R: Rng + ?Sized>(ports: usize, rng: &mut R) -> Result<Self> {
        let mut mesh = Self::zeros(ports)?;
        for c in &mut mesh.cells {
            c.theta = rng.random_range(0.0..PI);
            c.phi = rng.random_range(0.0..TAU);
            c.gamma = rng.random_range(0.0..TAU);
        }
        Ok(mesh)
    }

    pub fn ports(&self) -> usize {
        self.ports
    }

    pub fn cells(&self) -> &[MziCell] {
        &self.cells
    }

    pub fn param_count(&self) -> usize {
        3 * self.cells.len()
    }

    /// Flat `(theta, phi, gamma)` triples in layout order.
    pub fn phases(&self) -> Vec<f64> {
        self.cells
            .iter()
            .flat_map(|c| [c.theta, c.phi, c.gamma])
            .collect()
    }

    /// Replace the phases, wrapping each into its range.
    pub fn set_phases(&mut self, phases: &[f64]) -> Result<()> {
        check_dim(self.param_count(), phases.len(), "mesh phases")?;
        for (c, p) in self.cells.iter_mut().zip(phases.chunks_exact(3)) {
            *c = MziCell::new(p[0], p[1], p[2]);
        }
        Ok(())
    }

    pub fn transfers(&self) -> Vec<Transfer> {
        self.cells.iter().map(MziCell::transfer).collect()
    }

    /// Transfers for raw (possibly unwrapped) phase triples.
    pub fn transfers_from(&self, phases: &[f64]) -> Result<Vec<Transfer>> {
        check_dim(self.param_count(), phases.len(), "mesh phases")?;
        Ok(phases
            .chunks_exact(3)
            .map(|p| transfer(p[0], p[1], p[2]))
            .collect())
    }

    /// Propagate one field in place.
    pub fn forward(&self, field: &mut [Complex64]) -> Result<()> {
        check_dim(self.ports, field.len(), "field modes")?;
        propagate(&rectangular_layout(self.ports), &self.transfers(), field);
        Ok(())
    }

    pub fn forward_batch(&self, fields: ArrayView2<'_, Complex64>) -> Result<Array2<Complex64>> {
        self.forward_batch_with(&self.transfers(), fields)
    }

    /// Batch forward with explicit cell transfers; the mesh's own phases are
    /// not read.
    pub fn forward_batch_with(
        &self,
        transfers: &[Transfer],
        fields: ArrayView2<'_, Complex64>,
    ) -> Result<Array2<Complex64>> {
        check_dim(self.ports, fields.ncols(), "field modes")?;
        check_dim(self.cells.len(), transfers.len(), "cell transfers")?;
        let layout = rectangular_layout(self.ports);
        let mut out = fields.to_owned();
        for mut row in out.rows_mut() {
            match row.as_slice_mut() {
                Some(s) => propagate(&layout, transfers, s),
                None => unreachable!("owned rows are contiguous"),
            }
        }
        Ok(out)
    }

    /// Dense `d x d` matrix of the mesh.
    pub fn matrix(&self) -> Array2<Complex64> {
        let eye = Array2::from_shape_fn((self.ports, self.ports), |(i, j)| {
            Complex64::new(if i == j { 1.0 } else { 0.0 }, 0.0)
        });
        // rows are propagated basis vectors, i.e. the transpose
        self.forward_batch(eye.view())
            .expect("square")
            .reversed_axes()
    }

    /// CSV with columns `diag, cell, theta, phi, gamma`.
    pub fn write_phases_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["diag", "cell", "theta", "phi", "gamma"])?;
        for (pos, c) in rectangular_layout(self.ports).iter().zip(&self.cells) {
            w.write_record([
                pos.diag.to_string(),
                pos.cell.to_string(),
                c.theta.to_string(),
                c.phi.to_string(),
                c.gamma.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<phase csv>", e))?;
        Ok(())
    }

    pub fn read_phases_csv<R: Read>(ports: usize, reader: R) -> Result<Self> {
        let mut mesh = Self::zeros(ports)?;
        let layout = rectangular_layout(ports);
        let mut r = csv::Reader::from_reader(reader);
        let mut n = 0;
        for (k, row) in r.deserialize::<(usize, usize, f64, f64, f64)>().enumerate() {
            let (diag, cell, theta, phi, gamma) = row?;
            let pos = layout
                .get(k)
                .ok_or_else(|| Error::Format(format!("more than {} cells", layout.len())))?;
            if (pos.diag, pos.cell) != (diag, cell) {
                return Err(Error::Format(format!(
                    "row {k}: expected cell ({}, {}), found ({diag}, {cell})",
                    pos.diag, pos.cell
                )));
            }
            mesh.cells[k] = MziCell::new(theta, phi, gamma);
            n += 1;
        }
        check_dim(layout.len(), n, "phase rows")?;
        Ok(mesh)
    }
}

fn propagate(layout: &[CellPosition], transfers: &[Transfer], field: &mut [Complex64]) {
    for (pos, t) in layout.iter().zip(transfers) {
        let (a, b) = (field[pos.port], field[pos.port + 1]);
        field[pos.port] = t[0][0] * a + t[0][1] * b;
        field[pos.port + 1] = t[1][0] * a + t[1][1] * b;
    }
}

/// Per-port `|z|^2`.
pub fn intensity_readout(field: &[Complex64]) -> Vec<f64> {
    field.iter().map(|z| z.norm_sqr()).collect()
}

pub fn intensity_batch(fields: ArrayView2<'_, Complex64>) -> Array2<f64> {
    fields.mapv(|z| z.norm_sqr())
}

/// Pixels become in-phase real amplitudes, optionally scaled to unit norm.
pub fn encode_image(pixels: &[f64], normalize: bool) -> Vec<Complex64> {
    let norm = pixels.iter().map(|p| p * p).sum::<f64>().sqrt();
    let scale = if normalize && norm > 0.0 {
        1.0 / norm
    } else {
        1.0
    };
    pixels
        .iter()
        .map(|&p| Complex64::new(p * scale, 0.0))
        .collect()
}

pub fn encode_batch(x: ArrayView2<'_, f64>, normalize: bool) -> Array2<Complex64> {
    let mut out = Array2::zeros(x.raw_dim());
    for (src, mut dst) in x.rows().into_iter().zip(out.rows_mut()) {
        let row = encode_image(&src.to_vec(), normalize);
        dst.assign(&ndarray::ArrayView1::from(&row));
    }
    out
}

/// Pack a field as `re, im` pairs.
pub fn pack(field: &[Complex64]) -> Vec<f64> {
    field.iter().flat_map(|z| [z.re, z.im]).collect()
}

pub fn unpack(packed: &[f64]) -> Vec<Complex64> {
    packed
        .chunks_exact(2)
        .map(|p| Complex64::new(p[0], p[1]))
        .collect()
}

/// Apply an activation over packed fields, row by row.
pub fn apply_field_activation(activation: &ActivationBox, fields: &mut Array2<Complex64>) {
    for mut row in fields.rows_mut() {
        let mut packed = pack(row.as_slice().expect("contiguous"));
        activation.apply(&mut packed);
        for (dst, z) in row.iter_mut().zip(unpack(&packed)) {
            *dst = z;
        }
    }
}

/// `z -> z cos(gain |z|^2 + bias)` per mode: intensity-dependent
/// transmission standing in for an electro-optic activation.
#[derive(Clone, Debug, PartialEq)]
pub struct EoActivation {
    pub gain: f64,
    pub bias: f64,
    name: String,
}

impl EoActivation {
    pub fn new(gain: f64, bias: f64) -> Self {
        let name = if gain == PI / 2.0 && bias == 0.0 {
            "eo".to_string()
        } else {
            format!("eo(gain={gain},bias={bias})")
        };
        Self { gain, bias, name }
    }
}

impl Default for EoActivation {
    fn default() -> Self {
        Self::new(PI / 2.0, 0.0)
    }
}

impl ActivationFn for EoActivation {
    fn name(&self) -> &str {
        &self.name
    }

    fn apply(&self, x: &mut [f64]) {
        for p in x.chunks_exact_mut(2) {
            let t = (self.gain * (p[0] * p[0] + p[1] * p[1]) + self.bias).cos();
            p[0] *= t;
            p[1] *= t;
        }
    }
}

/// Counts calls into a wrapped activation.
#[derive(Clone)]
pub struct InstrumentedActivation {
    inner: ActivationBox,
    forward_calls: Arc<AtomicU64>,
    derivative_calls: Arc<AtomicU64>,
}

impl InstrumentedActivation {
    pub fn new(inner: ActivationBox) -> Self {
        Self {
            inner,
            forward_calls: Arc::new(AtomicU64::new(0)),
            derivative_calls: Arc::new(AtomicU64::new(0)),
        }
    }

    pub fn forward_calls(&self) -> u64 {
        self.forward_calls.load(Ordering::Relaxed)
    }

    pub fn derivative_calls(&self) -> u64 {
        self.derivative_calls.load(Ordering::Relaxed)
    }
}

impl ActivationFn for InstrumentedActivation {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn apply(&self, x: &mut [f64]) {
        self.forward_calls.fetch_add(1, Ordering::Relaxed);
        self.inner.apply(x)
    }

    fn derivative(&self, z: &[f64]) -> Option<Vec<f64>> {
        self.derivative_calls.fetch_add(1, Ordering::Relaxed);
        self.inner.derivative(z)
    }
}
