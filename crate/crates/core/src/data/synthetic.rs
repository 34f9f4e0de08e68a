use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{DatasetSplit, Normalization, SplitTag, Targets};
use crate::error::{Error, Result};
use crate::nn::TensorShape;
use crate::rng::{stream, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticFunction {
    /// `sin x1 + cos x2` on two inputs.
    F1,
    /// `exp(x1) sin x2 + x3 cos x4 - x5 x1` on five inputs.
    F2,
}

impl SyntheticFunction {
    pub fn input_dim(self) -> usize {
        match self {
            SyntheticFunction::F1 => 2,
            SyntheticFunction::F2 => 5,
        }
    }

    pub fn eval(self, x: &[f64]) -> f64 {
        match self {
            SyntheticFunction::F1 => x[0].sin() + x[1].cos(),
            SyntheticFunction::F2 => x[0].exp() * x[1].sin() + x[2] * x[3].cos() - x[4] * x[0],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub function: SyntheticFunction,
    pub n_train: usize,
    pub n_test: usize,
    /// Noise standard deviation as a fraction of the clean training
    /// targets' standard deviation.
    pub noise_fraction: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(function: SyntheticFunction, seed: u64) -> Self {
        Self {
            function,
            n_train: 10_000,
            n_test: 2_000,
            noise_fraction: 0.05,
            seed,
        }
    }

    pub fn n_total(&self) -> usize {
        self.n_train + self.n_test
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train < 2 {
            return Err(Error::invalid("need at least two training samples"));
        }
        if !(self.noise_fraction >= 0.0) || !self.noise_fraction.is_finite() {
            return Err(Error::invalid("noise fraction must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Draw inputs uniformly from `[-1, 1]^d`, shuffle, split, add Gaussian
/// noise to the training targets only, then map both splits to `[-1, 1]`
/// using the noisy training minimum and maximum.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(DatasetSplit, DatasetSplit)> {
    spec.validate()?;
    let mut rng = stream(spec.seed, Stream::Data);
    let d = spec.function.input_dim();
    let n = spec.n_total();
    let mut x = Array2::from_shape_simple_fn((n, d), || rng.random_range(-1.0..=1.0));
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    x = x.select(ndarray::Axis(0), &perm);
    let clean: Vec<f64> = x
        .rows()
        .into_iter()
        .map(|r| spec.function.eval(r.as_slice().expect("standard layout")))
        .collect();
    let (train_clean, test_clean) = clean.split_at(spec.n_train);
    let mean = train_clean.iter().sum::<f64>() / spec.n_train as f64;
    let std =
        (train_clean.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / spec.n_train as f64).sqrt();
    let sigma = spec.noise_fraction * std;
    let train_noisy: Vec<f64> = train_clean
        .iter()
        .map(|y| {
            let e: f64 = rng.sample(StandardNormal);
            y + sigma * e
        })
        .collect();
    let y_min = train_noisy.iter().copied().fold(f64::INFINITY, f64::min);
    let y_max = train_noisy
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if !(y_max > y_min) {
        return Err(Error::invalid("degenerate training targets"));
    }
    let norm = Normalization { y_min, y_max };
    // Pin the extremes so they are exactly -1 and +1 despite rounding.
    let train_y: Vec<f64> = train_noisy
        .iter()
        .map(|&y| {
            if y == y_min {
                -1.0
            } else if y == y_max {
                1.0
            } else {
                norm.apply(y)
            }
        })
        .collect();
    let test_y: Vec<f64> = test_clean.iter().map(|&y| norm.apply(y)).collect();
    let shape = TensorShape::flat(d);
    let mut train = DatasetSplit::new(
        x.slice(ndarray::s![..spec.n_train, ..]).to_owned(),
        shape,
        Targets::Values(train_y),
        SplitTag::Train,
    )?;
    let mut test = DatasetSplit::new(
        x.slice(ndarray::s![spec.n_train.., ..]).to_owned(),
        shape,
        Targets::Values(test_y),
        SplitTag::Test,
    )?;
    train.normalization = Some(norm);
    test.normalization = Some(norm);
    Ok((train, test))
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    spec: SyntheticSpec,
    split: SplitTag,
    normalization: Option<Normalization>,
}

/// Write `x0..x{d-1},y` rows and a JSON sidecar next to `path`.
pub fn write_synthetic_csv(split: &DatasetSplit, spec: &SyntheticSpec, path: &Path) -> Result<()> {
    let values = split
        .targets
        .values()
        .ok_or_else(|| Error::invalid("synthetic splits carry real targets"))?;
    let mut w = csv::Writer::from_path(path).map_err(csv_io(path))?;
    let d = split.inputs.ncols();
    let mut header: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
    header.push("y".into());
    w.write_record(&header)?;
    for (row, y) in split.inputs.rows().into_iter().zip(values) {
        let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        rec.push(y.to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    let sidecar = Sidecar {
        spec: *spec,
        split: split.split,
        normalization: split.normalization,
    };
    let side = path.with_extension("json");
    fs::write(&side, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| Error::io(&side, e))
}

pub fn read_synthetic_csv(path: &Path) -> Result<(DatasetSplit, SyntheticSpec)> {
    let side = path.with_extension("json");
    let sidecar: Sidecar =
        serde_json::from_slice(&fs::read(&side).map_err(|e| Error::io(&side, e))?)?;
    let mut r = csv::Reader::from_path(path).map_err(csv_io(path))?;
    let d = r.headers()?.len().saturating_sub(1);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        for (i, field) in rec.iter().enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::Format(format!("bad number `{field}`")))?;
            if i < d {
                xs.push(v);
            } else {
                ys.push(v);
            }
        }
    }
    let inputs =
        Array2::from_shape_vec((ys.len(), d), xs).map_err(|e| Error::Format(e.to_string()))?;
    let mut split = DatasetSplit::new(
        inputs,
        TensorShape::flat(d),
        Targets::Values(ys),
        sidecar.split,
    )?;
    split.normalization = sidecar.normalization;
    Ok((split, sidecar.spec))
}

fn csv_io(path: &Path) -> impl FnOnce(csv::Error) -> Error + '_ {
    move |e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{other:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(function: SyntheticFunction, noise: f64) -> SyntheticSpec {
        SyntheticSpec {
            function,
            n_train: 500,
            n_test: 100,
            noise_fraction: noise,
            seed: 4,
        }
    }

    #[test]
    fn function_values_at_origin() {
        assert_eq!(SyntheticFunction::F1.eval(&[0.0, 0.0]), 1.0);
        assert_eq!(SyntheticFunction::F2.eval(&[0.0; 5]), 0.0);
    }

    #[test]
    fn train_targets_span_exactly_unit_interval() {
        for f in [SyntheticFunction::F1, SyntheticFunction::F2] {
            let (train, test) = generate_synthetic(&small(f, 0.05)).unwrap();
            let y = train.targets.values().unwrap();
            assert_eq!(y.iter().copied().fold(f64::INFINITY, f64::min), -1.0);
            assert_eq!(y.iter().copied().fold(f64::NEG_INFINITY, f64::max), 1.0);
            assert_eq!(test.len(), 100);
            assert!(train.inputs.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn reproducible_and_noise_only_touches_train() {
        let spec = small(SyntheticFunction::F1, 0.05);
        assert_eq!(
            generate_synthetic(&spec).unwrap(),
            generate_synthetic(&spec).unwrap()
        );
        let (tr_a, te_a) = generate_synthetic(&spec).unwrap();
        let (tr_b, te_b) = generate_synthetic(&small(SyntheticFunction::F1, 0.0)).unwrap();
        assert_eq!(tr_a.inputs, tr_b.inputs);
        assert_eq!(te_a.inputs, te_b.inputs);
        assert_ne!(tr_a.targets, tr_b.targets);
        // Test targets are clean: undo each split's normalization and compare.
        let (na, nb) = (te_a.normalization.unwrap(), te_b.normalization.unwrap());
        for (a, b) in te_a
            .targets
            .values()
            .unwrap()
            .iter()
            .zip(te_b.targets.values().unwrap())
        {
            assert!((na.invert(*a) - nb.invert(*b)).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let spec = small(SyntheticFunction::F2, 0.05);
        let (train, _) = generate_synthetic(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.csv");
        write_synthetic_csv(&train, &spec, &path).unwrap();
        let (back, back_spec) = read_synthetic_csv(&path).unwrap();
        assert_eq!(back, train);
        assert_eq!(back_spec, spec);
    }
}
