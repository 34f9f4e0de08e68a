//! In-memory datasets: IDX image files and synthetic regression corpora.

mod idx;
mod synthetic;

pub use idx::{load_idx, load_idx_images, load_idx_labels, IMAGE_MAGIC, LABEL_MAGIC};
pub use synthetic::{
    generate_synthetic, read_synthetic_csv, write_synthetic_csv, SyntheticFunction, SyntheticSpec,
};

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::nn::TensorShape;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Test,
}

/// Affine map from raw targets to `[-1, 1]` fixed by the training extremes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub y_min: f64,
    pub y_max: f64,
}

impl Normalization {
    pub fn apply(&self, y: f64) -> f64 {
        2.0 * (y - self.y_min) / (self.y_max - self.y_min) - 1.0
    }

    pub fn invert(&self, t: f64) -> f64 {
        (t + 1.0) / 2.0 * (self.y_max - self.y_min) + self.y_min
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Targets {
    Classes {
        labels: Vec<usize>,
        num_classes: usize,
    },
    Values(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes { labels, .. } => labels.len(),
            Targets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match self {
            Targets::Classes { labels, .. } => Some(labels),
            Targets::Values(_) => None,
        }
    }

    pub fn values(&self) -> Option<&[f64]> {
        match self {
            Targets::Values(v) => Some(v),
            Targets::Classes { .. } => None,
        }
    }

    fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Classes {
                labels,
                num_classes,
            } => Targets::Classes {
                labels: idx.iter().map(|&i| labels[i]).collect(),
                num_classes: *num_classes,
            },
            Targets::Values(v) => Targets::Values(idx.iter().map(|&i| v[i]).collect()),
        }
    }
}

/// Sample-major inputs with aligned targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub inputs: Array2<f64>,
    pub shape: TensorShape,
    pub targets: Targets,
    pub split: SplitTag,
    pub normalization: Option<Normalization>,
}

impl DatasetSplit {
    pub fn new(
        inputs: Array2<f64>,
        shape: TensorShape,
        targets: Targets,
        split: SplitTag,
    ) -> Result<Self> {
        check_dim(inputs.nrows(), targets.len(), "targets vs samples")?;
        check_dim(shape.len(), inputs.ncols(), "sample shape vs features")?;
        if let Targets::Classes {
            labels,
            num_classes,
        } = &targets
        {
            if let Some(&y) = labels.iter().find(|&&y| y >= *num_classes) {
                return Err(Error::InvalidLabel(y));
            }
        }
        Ok(Self {
            inputs,
            shape,
            targets,
            split,
            normalization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows `idx` in the given order.
    pub fn select(&self, idx: &[usize]) -> DatasetSplit {
        DatasetSplit {
            inputs: self.inputs.select(Axis(0), idx),
            shape: self.shape,
            targets: self.targets.select(idx),
            split: self.split,
            normalization: self.normalization,
        }
    }

    /// Rows `range` in order.
    pub fn slice(&self, range: std::ops::Range<usize>) -> DatasetSplit {
        let idx: Vec<usize> = range.collect();
        self.select(&idx)
    }

    /// Keep only samples whose class is below `classes`.
    pub fn filter_classes(&self, classes: usize) -> Result<DatasetSplit> {
        let labels = self
            .targets
            .labels()
            .ok_or_else(|| Error::invalid("class filtering needs class labels"))?;
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] < classes).collect();
        let mut out = self.select(&idx);
        if let Targets::Classes { num_classes, .. } = &mut out.targets {
            *num_classes = classes;
        }
        Ok(out)
    }

    /// Split into the first `n` rows and the rest.
    pub fn split_at(&self, n: usize) -> Result<(DatasetSplit, DatasetSplit)> {
        if n > self.len() {
            return Err(Error::invalid(format!(
                "cannot split {} rows at {n}",
                self.len()
            )));
        }
        let mut tail = self.slice(n..self.len());
        tail.split = SplitTag::Test;
        Ok((self.slice(0..n), tail))
    }
}

/// Map digit labels `k` to regression targets `2k/9 - 1`.
pub fn mnist_as_regression(split: &DatasetSplit) -> Result<DatasetSplit> {
    let labels = split
        .targets
        .labels()
        .ok_or_else(|| Error::invalid("expected digit labels"))?;
    let values = labels
        .iter()
        .map(|&k| {
            if k > 9 {
                Err(Error::InvalidLabel(k))
            } else {
                Ok(2.0 * k as f64 / 9.0 - 1.0)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DatasetSplit {
        inputs: split.inputs.clone(),
        shape: split.shape,
        targets: Targets::Values(values),
        split: split.split,
        normalization: Some(Normalization {
            y_min: 0.0,
            y_max: 9.0,
        }),
    })
}

/// Seeded subsample of `n` rows without replacement.
///
/// Classification splits are stratified: every class gets `n / classes`
/// samples and the remainder goes one each to randomly chosen classes (or
/// to other classes when one runs out). Regression splits are sampled
/// uniformly. The result is shuffled.
pub fn subsample<R: Rng + ?Sized>(
    split: &DatasetSplit,
    n: usize,
    rng: &mut R,
) -> Result<DatasetSplit> {
    if n > split.len() {
        return Err(Error::invalid(format!(
            "cannot take {n} samples from {}",
            split.len()
        )));
    }
    let mut chosen = match &split.targets {
        Targets::Values(_) => {
            let mut idx: Vec<usize> = (0..split.len()).collect();
            idx.shuffle(rng);
            idx.truncate(n);
            idx
        }
        Targets::Classes {
            labels,
            num_classes,
        } => {
            let mut pools: Vec<Vec<usize>> = vec![Vec::new(); *num_classes];
            for (i, &y) in labels.iter().enumerate() {
                pools[y].push(i);
            }
            for p in &mut pools {
                p.shuffle(rng);
            }
            let mut quota = vec![0usize; *num_classes];
            let mut remaining = n;
            // Round-robin over a shuffled class order so allocations differ
            // by at most one whenever the pools allow it.
            let mut order: Vec<usize> = (0..*num_classes).collect();
            order.shuffle(rng);
            while remaining > 0 {
                let mut progressed = false;
                for &c in &order {
                    if remaining == 0 {
                        break;
                    }
                    if quota[c] < pools[c].len() {
                        quota[c] += 1;
                        remaining -= 1;
                        progressed = true;
                    }
                }
                if !progressed {
                    break;
                }
            }
            let mut idx: Vec<usize> = pools
                .iter()
                .zip(&quota)
                .flat_map(|(p, &q)| p[..q].iter().copied())
                .collect();
            idx.shuffle(rng);
            idx
        }
    };
    chosen.truncate(n);
    Ok(split.select(&chosen))
}

/// Average-pool square images by `factor` (channels kept).
pub fn downsample_average(split: &DatasetSplit, factor: usize) -> Result<DatasetSplit> {
    let s = split.shape;
    if factor == 0 || !s.height.is_multiple_of(factor) || !s.width.is_multiple_of(factor) {
        return Err(Error::invalid(format!(
            "factor {factor} does not divide {}x{}",
            s.height, s.width
        )));
    }
    let out = TensorShape::new(s.channels, s.height / factor, s.width / factor);
    let area = (factor * factor) as f64;
    let mut inputs = Array2::zeros((split.len(), out.len()));
    for (src, mut dst) in split.inputs.rows().into_iter().zip(inputs.rows_mut()) {
        for c in 0..s.channels {
            for y in 0..s.height {
                for x in 0..s.width {
                    let o = (c * out.height + y / factor) * out.width + x / factor;
                    dst[o] += src[(c * s.height + y) * s.width + x] / area;
                }
            }
        }
    }
    Ok(DatasetSplit {
        inputs,
        shape: out,
        targets: split.targets.clone(),
        split: split.split,
        normalization: split.normalization,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use ndarray::array;

    fn toy(n: usize, classes: usize) -> DatasetSplit {
        let inputs = Array2::from_shape_fn((n, 2), |(i, j)| (i * 2 + j) as f64);
        let labels = (0..n).map(|i| i % classes).collect();
        DatasetSplit::new(
            inputs,
            TensorShape::flat(2),
            Targets::Classes {
                labels,
                num_classes: classes,
            },
            SplitTag::Train,
        )
        .unwrap()
    }

    #[test]
    fn regression_label_map() {
        let d = DatasetSplit::new(
            Array2::zeros((3, 1)),
            TensorShape::flat(1),
            Targets::Classes {
                labels: vec![0, 9, 4],
                num_classes: 10,
            },
            SplitTag::Test,
        )
        .unwrap();
        let r = mnist_as_regression(&d).unwrap();
        let v = r.targets.values().unwrap();
        assert_eq!(v[0], -1.0);
        assert_eq!(v[1], 1.0);
        assert!((v[2] + 1.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn full_subsample_is_a_permutation() {
        let d = toy(50, 5);
        let s = subsample(&d, 50, &mut seeded(1)).unwrap();
        let mut firsts: Vec<u64> = s.inputs.column(0).iter().map(|&v| v as u64).collect();
        firsts.sort_unstable();
        assert_eq!(firsts, (0..50).map(|i| 2 * i).collect::<Vec<_>>());
    }

    #[test]
    fn stratified_counts_and_determinism() {
        let d = toy(5000, 10);
        let a = subsample(&d, 1000, &mut seeded(3)).unwrap();
        let b = subsample(&d, 1000, &mut seeded(3)).unwrap();
        assert_eq!(a, b);
        let mut counts = [0usize; 10];
        for &y in a.targets.labels().unwrap() {
            counts[y] += 1;
        }
        assert!(counts.iter().all(|&c| c.abs_diff(100) <= 1));
        let odd = subsample(&d, 1003, &mut seeded(3)).unwrap();
        let mut counts = [0usize; 10];
        for &y in odd.targets.labels().unwrap() {
            counts[y] += 1;
        }
        assert!(counts.iter().all(|&c| c == 100 || c == 101));
    }

    #[test]
    fn downsample_averages_blocks() {
        let d = DatasetSplit::new(
            array![[
                1.0, 3.0, 0.0, 0.0, 5.0, 7.0, 0.0, 4.0, 1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0
            ]],
            TensorShape::new(1, 4, 4),
            Targets::Values(vec![0.0]),
            SplitTag::Train,
        )
        .unwrap();
        let s = downsample_average(&d, 2).unwrap();
        assert_eq!(s.shape, TensorShape::new(1, 2, 2));
        assert_eq!(s.inputs, array![[4.0, 1.0, 1.0, 2.0]]);
    }

    #[test]
    fn normalization_inverts() {
        let n = Normalization {
            y_min: -3.0,
            y_max: 5.0,
        };
        assert_eq!(n.apply(-3.0), -1.0);
        assert_eq!(n.apply(5.0), 1.0);
        for y in [-2.5, 0.0, 4.2] {
            assert!((n.invert(n.apply(y)) - y).abs() < 1e-12);
        }
    }
}
