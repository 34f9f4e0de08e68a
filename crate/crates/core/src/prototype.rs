//! Maximally separated prototype vectors on the unit hypersphere.
//!
//! A prototype set for `c` classes in `d >= c` dimensions is built from the
//! vertices of the standard `(c-1)`-simplex: translate the identity columns so
//! the centroid sits at the origin, rescale every vertex to unit length, and
//! zero-pad to `d` rows. The resulting columns have unit norm, sum to zero and
//! share the pairwise dot product `-1/(c-1)`. A uniformly random rotation from
//! SO(d) then removes the shared orientation.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Cap on consecutive negative-determinant rejections in [`random_rotation`].
pub const MAX_ROTATION_ATTEMPTS: usize = 64;

/// Unit-norm, maximally separated class directions, one column per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    vectors: Array2<f64>,
}

impl PrototypeSet {
    /// Centered, normalized simplex vertices, zero-padded to `dim` rows.
    pub fn simplex(num_classes: usize, dim: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid(format!(
                "prototype sets need at least 2 classes, got {num_classes}"
            )));
        }
        if dim < num_classes {
            return Err(Error::invalid(format!(
                "prototype dimension {dim} is smaller than the class count {num_classes}"
            )));
        }
        let c = num_classes as f64;
        let z = (1.0 - 1.0 / c).sqrt();
        let mut vectors = Array2::zeros((dim, num_classes));
        for j in 0..num_classes {
            for i in 0..num_classes {
                let centered = if i == j { 1.0 - 1.0 / c } else { -1.0 / c };
                vectors[[i, j]] = centered / z;
            }
        }
        Ok(Self { vectors })
    }

    /// Simplex prototypes under a fresh uniformly random rotation.
    ///
    /// Only the first `c` columns of the rotation touch the padded simplex,
    /// so they are drawn directly with [`random_frame`].
    pub fn random<R: Rng + ?Sized>(num_classes: usize, dim: usize, rng: &mut R) -> Result<Self> {
        let set = Self::simplex(num_classes, dim)?;
        let frame = random_frame(dim, num_classes, rng)?;
        let head = set.vectors.slice(ndarray::s![..num_classes, ..]);
        Ok(Self {
            vectors: frame.dot(&head),
        })
    }

    /// Build from a `dim x classes` matrix without checking the geometry.
    pub fn from_matrix(vectors: Array2<f64>) -> Result<Self> {
        if vectors.ncols() < 2 || vectors.nrows() < vectors.ncols() {
            return Err(Error::invalid(format!(
                "prototype matrix must be d x c with d >= c >= 2, got {:?}",
                vectors.dim()
            )));
        }
        Ok(Self { vectors })
    }

    pub fn num_classes(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn dim(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn vectors(&self) -> &Array2<f64> {
        &self.vectors
    }

    pub fn prototype(&self, class: usize) -> ArrayView1<'_, f64> {
        self.vectors.column(class)
    }

    /// Apply `rotation` to every prototype.
    pub fn rotate(&self, rotation: &RotationMatrix) -> Result<Self> {
        check_dim(
            self.dim(),
            rotation.dim(),
            "rotation size vs prototype dimension",
        )?;
        Ok(Self {
            vectors: rotation.matrix().dot(&self.vectors),
        })
    }

    /// Write as CSV: header `class_0..class_{c-1}`, one row per dimension.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record((0..self.num_classes()).map(|j| format!("class_{j}")))?;
        for row in self.vectors.rows() {
            w.write_record(row.iter().map(|v| v.to_string()))?;
        }
        w.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        for (j, name) in header.iter().enumerate() {
            if name != format!("class_{j}") {
                return Err(Error::Format(format!(
                    "unexpected prototype column header {name:?} at position {j}"
                )));
            }
        }
        let c = header.len();
        let mut values = Vec::new();
        let mut rows = 0;
        for record in r.records() {
            let record = record?;
            check_dim(c, record.len(), "prototype CSV row width")?;
            for field in record.iter() {
                values.push(
                    field.trim().parse::<f64>().map_err(|e| {
                        Error::Format(format!("bad prototype value {field:?}: {e}"))
                    })?,
                );
            }
            rows += 1;
        }
        let vectors =
            Array2::from_shape_vec((rows, c), values).map_err(|e| Error::Format(e.to_string()))?;
        Self::from_matrix(vectors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(file))
    }
}

/// A proper rotation: orthogonal with determinant +1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RotationMatrix(Array2<f64>);

impl RotationMatrix {
    pub fn identity(dim: usize) -> Self {
        Self(Array2::eye(dim))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }
}

/// Antipodal pair encoding the regression bounds -1 (`lower`) and +1 (`upper`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionPrototypePair {
    pub lower: Array1<f64>,
    pub upper: Array1<f64>,
}

impl RegressionPrototypePair {
    pub fn dim(&self) -> usize {
        self.upper.len()
    }
}

/// One orthogonal draw before the determinant check.
#[derive(Clone, Debug)]
pub struct OrthogonalDraw {
    /// `Q A`, with `A = diag(sign(R_ii))` absorbing the QR sign convention.
    pub matrix: Array2<f64>,
    /// Sign of `det(Q A)`, exact (tracked through the reflections).
    pub det_sign: f64,
}

/// Sample `M ~ N(0, I)`, factor `M = QR` and return `Q A` with
/// `A_ii = R_ii / |R_ii|`. Returns `None` if some `R_ii` is exactly zero.
pub fn sample_orthogonal<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Option<OrthogonalDraw> {
    let m = Array2::from_shape_simple_fn((dim, dim), || rng.sample::<f64, _>(StandardNormal));
    let (mut q, r, reflections) = householder_qr(&m);
    let mut det_sign = if reflections % 2 == 0 { 1.0 } else { -1.0 };
    for i in 0..dim {
        let rii = r[[i, i]];
        if rii == 0.0 {
            return None;
        }
        let s = rii.signum();
        det_sign *= s;
        if s < 0.0 {
            q.column_mut(i).mapv_inplace(|v| -v);
        }
    }
    Some(OrthogonalDraw {
        matrix: q,
        det_sign,
    })
}

/// Uniformly random rotation from SO(`dim`), by rejection of the
/// negative-determinant half of the Haar-orthogonal draws.
pub fn random_rotation<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Result<RotationMatrix> {
    if dim == 0 {
        return Err(Error::invalid("rotation dimension must be positive"));
    }
    for _ in 0..MAX_ROTATION_ATTEMPTS {
        match sample_orthogonal(dim, rng) {
            Some(draw) if draw.det_sign > 0.0 => return Ok(RotationMatrix(draw.matrix)),
            _ => continue,
        }
    }
    Err(Error::RotationRejected(MAX_ROTATION_ATTEMPTS))
}

/// The first `k` columns of a uniformly random rotation from SO(`dim`).
///
/// For `k < dim` these are distributed as the Gram-Schmidt orthonormalization
/// of `k` independent Gaussian vectors: flipping the last column of any
/// orthogonal matrix fixes its determinant without touching the first
/// `dim - 1` columns, so the SO(`dim`) and O(`dim`) marginals coincide.
/// For `k == dim` this is [`random_rotation`].
pub fn random_frame<R: Rng + ?Sized>(dim: usize, k: usize, rng: &mut R) -> Result<Array2<f64>> {
    if k == 0 || k > dim {
        return Err(Error::invalid(format!(
            "cannot take {k} columns of a {dim}-dim rotation"
        )));
    }
    if k == dim {
        return Ok(random_rotation(dim, rng)?.into_inner());
    }
    let mut m = Array2::from_shape_simple_fn((dim, k), || rng.sample::<f64, _>(StandardNormal));
    for j in 0..k {
        // Two Gram-Schmidt passes keep the columns orthogonal to rounding.
        for _ in 0..2 {
            for i in 0..j {
                let prev = m.column(i).to_owned();
                let dot = prev.dot(&m.column(j));
                m.column_mut(j).scaled_add(-dot, &prev);
            }
        }
        let norm = m.column(j).dot(&m.column(j)).sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroDirection);
        }
        m.column_mut(j).mapv_inplace(|v| v / norm);
    }
    Ok(m)
}

/// Random antipodal regression prototypes: the upper bound is the first
/// column of a rotated two-class simplex.
pub fn regression_prototypes<R: Rng + ?Sized>(
    dim: usize,
    rng: &mut R,
) -> Result<RegressionPrototypePair> {
    if dim < 2 {
        return Err(Error::invalid(format!(
            "regression prototypes need dimension >= 2, got {dim}"
        )));
    }
    let set = PrototypeSet::random(2, dim, rng)?;
    let upper = set.prototype(0).to_owned();
    let lower = upper.mapv(|v| -v);
    Ok(RegressionPrototypePair { lower, upper })
}

/// Householder QR of a square matrix. Returns `(Q, R, reflections)` where
/// `reflections` counts the non-trivial reflectors, so `det(Q) = (-1)^reflections`.
fn householder_qr(m: &Array2<f64>) -> (Array2<f64>, Array2<f64>, usize) {
    let n = m.nrows();
    let mut r = m.clone();
    let mut q = Array2::<f64>::eye(n);
    let mut reflections = 0;
    for k in 0..n.saturating_sub(1) {
        let x = r.slice(ndarray::s![k.., k]).to_owned();
        let norm = x.dot(&x).sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if x[0] >= 0.0 { -norm } else { norm };
        let mut v = x;
        v[0] -= alpha;
        let vnorm = v.dot(&v).sqrt();
        if vnorm == 0.0 {
            continue;
        }
        v.mapv_inplace(|e| e / vnorm);

        // R[k.., :] -= 2 v (v^T R[k.., :])
        let mut block = r.slice_mut(ndarray::s![k.., ..]);
        let proj = v.dot(&block);
        for (i, vi) in v.iter().enumerate() {
            let mut row = block.row_mut(i);
            row.scaled_add(-2.0 * vi, &proj);
        }
        // Q[:, k..] -= 2 (Q[:, k..] v) v^T
        let mut qblock = q.slice_mut(ndarray::s![.., k..]);
        let qv = qblock.dot(&v);
        for (j, vj) in v.iter().enumerate() {
            let mut col = qblock.column_mut(j);
            col.scaled_add(-2.0 * vj, &qv);
        }
        for i in (k + 1)..n {
            r[[i, k]] = 0.0;
        }
        reflections += 1;
    }
    (q, r, reflections)
}

/// Largest pairwise-dot deviation from `-1/(c-1)` over distinct columns.
pub fn separation_error(set: &PrototypeSet) -> f64 {
    let c = set.num_classes();
    let target = -1.0 / (c as f64 - 1.0);
    let gram = set.vectors().t().dot(set.vectors());
    let mut worst: f64 = 0.0;
    for i in 0..c {
        for j in 0..c {
            if i != j {
                worst = worst.max((gram[[i, j]] - target).abs());
            }
        }
    }
    worst
}

/// Largest deviation of a column norm from 1.
pub fn norm_error(set: &PrototypeSet) -> f64 {
    set.vectors()
        .columns()
        .into_iter()
        .map(|c| (c.dot(&c).sqrt() - 1.0).abs())
        .fold(0.0, f64::max)
}

/// Largest absolute entry of the column sum.
pub fn centroid_error(set: &PrototypeSet) -> f64 {
    set.vectors()
        .sum_axis(Axis(1))
        .iter()
        .map(|v| v.abs())
        .fold(0.0, f64::max)
}

/// The fixed targets of one training unit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TapPrototypes {
    Classification(PrototypeSet),
    Regression(RegressionPrototypePair),
}

impl TapPrototypes {
    pub fn dim(&self) -> usize {
        match self {
            TapPrototypes::Classification(set) => set.dim(),
            TapPrototypes::Regression(pair) => pair.dim(),
        }
    }
}
