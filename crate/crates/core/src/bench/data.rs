use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    downsample_average, generate_synthetic, load_idx, mnist_as_regression, subsample, DatasetSplit,
    SplitTag, SyntheticFunction, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

pub const MNIST_DIR_ENV: &str = "FFZERO_MNIST_DIR";
pub const FASHION_DIR_ENV: &str = "FFZERO_FASHION_MNIST_DIR";

const SUBSET_IMAGES: &str = "mnist10k-images-idx3-ubyte.gz";
const SUBSET_LABELS: &str = "mnist10k-labels-idx1-ubyte.gz";
const SUBSET_TRAIN: usize = 8000;
/// Training images used at paper scale; the rest of the official training
/// file is left unused.
const PAPER_TRAIN_POOL: usize = 50_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetId {
    Mnist,
    MnistRegression,
    FashionMnist,
    SyntheticF1,
    SyntheticF2,
}

impl DatasetId {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetId::Mnist => "mnist",
            DatasetId::MnistRegression => "mnist_regression",
            DatasetId::FashionMnist => "fashion_mnist",
            DatasetId::SyntheticF1 => "synthetic_f1",
            DatasetId::SyntheticF2 => "synthetic_f2",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [
            DatasetId::Mnist,
            DatasetId::MnistRegression,
            DatasetId::FashionMnist,
            DatasetId::SyntheticF1,
            DatasetId::SyntheticF2,
        ]
        .into_iter()
        .find(|d| d.as_str() == s)
        .ok_or_else(|| Error::invalid(format!("unknown dataset `{s}`")))
    }

    pub fn is_regression(self) -> bool {
        matches!(
            self,
            DatasetId::MnistRegression | DatasetId::SyntheticF1 | DatasetId::SyntheticF2
        )
    }

    pub fn is_image(self) -> bool {
        matches!(
            self,
            DatasetId::Mnist | DatasetId::MnistRegression | DatasetId::FashionMnist
        )
    }

    fn synthetic(self) -> Option<SyntheticFunction> {
        match self {
            DatasetId::SyntheticF1 => Some(SyntheticFunction::F1),
            DatasetId::SyntheticF2 => Some(SyntheticFunction::F2),
            _ => None,
        }
    }
}

/// Where image data was found.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ImageFiles {
    /// The standard four-file distribution.
    Official {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    /// The bundled 10 000-digit subset: first 8 000 train, last 2 000 test.
    Subset { images: PathBuf, labels: PathBuf },
}

fn find_file(dir: &Path, stem: &str) -> Option<PathBuf> {
    [stem.to_string(), format!("{stem}.gz")]
        .into_iter()
        .map(|n| dir.join(n))
        .find(|p| p.is_file())
}

fn official_in(dir: &Path) -> Option<ImageFiles> {
    Some(ImageFiles::Official {
        train_images: find_file(dir, "train-images-idx3-ubyte")?,
        train_labels: find_file(dir, "train-labels-idx1-ubyte")?,
        test_images: find_file(dir, "t10k-images-idx3-ubyte")?,
        test_labels: find_file(dir, "t10k-labels-idx1-ubyte")?,
    })
}

fn subset_dirs() -> Vec<PathBuf> {
    let mut dirs = Vec::new();
    if let Ok(cwd) = std::env::current_dir() {
        for a in cwd.ancestors() {
            dirs.push(a.join("data").join("mnist"));
        }
    }
    dirs.push(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    dirs
}

/// Locate image files: the directory named by the dataset's environment
/// variable first, then (MNIST only) the bundled subset under `data/mnist`.
pub fn locate_images(id: DatasetId) -> Result<ImageFiles> {
    let env = if id == DatasetId::FashionMnist {
        FASHION_DIR_ENV
    } else {
        MNIST_DIR_ENV
    };
    if let Some(dir) = std::env::var_os(env) {
        let dir = PathBuf::from(dir);
        return official_in(&dir).ok_or_else(|| {
            Error::invalid(format!(
                "{env}={} does not hold train-/t10k- images and labels",
                dir.display()
            ))
        });
    }
    if id == DatasetId::FashionMnist {
        return Err(Error::invalid(format!(
            "FashionMNIST is not bundled; set {FASHION_DIR_ENV}"
        )));
    }
    for dir in subset_dirs() {
        if let Some(dir) = official_in(&dir) {
            return Ok(dir);
        }
        let (images, labels) = (dir.join(SUBSET_IMAGES), dir.join(SUBSET_LABELS));
        if images.is_file() && labels.is_file() {
            return Ok(ImageFiles::Subset { images, labels });
        }
    }
    Err(Error::invalid(format!(
        "no MNIST files found; run scripts/fetch_mnist_subset.py or set {MNIST_DIR_ENV}"
    )))
}

/// Train and test pools before any subsampling.
pub fn load_image_pools(id: DatasetId, paper_scale: bool) -> Result<(DatasetSplit, DatasetSplit)> {
    match locate_images(id)? {
        ImageFiles::Official {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => {
            let train = load_idx(&train_images, &train_labels)?;
            let train = train.slice(0..train.len().min(PAPER_TRAIN_POOL));
            let mut test = load_idx(&test_images, &test_labels)?;
            test.split = SplitTag::Test;
            Ok((train, test))
        }
        ImageFiles::Subset { .. } if paper_scale => Err(Error::invalid(format!(
            "paper scale needs the full dataset; set {MNIST_DIR_ENV}"
        ))),
        ImageFiles::Subset { images, labels } => {
            let all = load_idx(&images, &labels)?;
            let (train, mut test) = all.split_at(SUBSET_TRAIN.min(all.len()))?;
            test.split = SplitTag::Test;
            Ok((train, test))
        }
    }
}

/// Sizes and preprocessing of one dataset request.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataRequest {
    pub dataset: DatasetId,
    pub train_size: usize,
    pub test_size: usize,
    pub paper_scale: bool,
    /// Average-pool factor applied to images (1 keeps them).
    #[serde(default = "one")]
    pub downsample: usize,
    /// Keep only labels below this (classification only).
    #[serde(default)]
    pub classes: Option<usize>,
}

fn one() -> usize {
    1
}

fn shrink(split: DatasetSplit, n: usize, seed: u64) -> Result<DatasetSplit> {
    if n >= split.len() {
        return Ok(split);
    }
    subsample(&split, n, &mut stream(seed, Stream::Subsample))
}

/// Build the train and test splits of `req`. Subsampling (when a pool is
/// larger than requested) is stratified and drawn from the seed's
/// subsample stream; synthetic data comes from the seed's data stream.
pub fn load_dataset(req: &DataRequest, seed: u64) -> Result<(DatasetSplit, DatasetSplit)> {
    if let Some(function) = req.dataset.synthetic() {
        let mut spec = SyntheticSpec::new(function, seed);
        spec.n_train = req.train_size;
        spec.n_test = req.test_size;
        return generate_synthetic(&spec);
    }
    let (mut train, mut test) = load_image_pools(req.dataset, req.paper_scale)?;
    if req.downsample > 1 {
        train = downsample_average(&train, req.downsample)?;
        test = downsample_average(&test, req.downsample)?;
    }
    if let Some(c) = req.classes {
        train = train.filter_classes(c)?;
        test = test.filter_classes(c)?;
    }
    let mut train = shrink(train, req.train_size, seed)?;
    let mut test = shrink(test, req.test_size, seed.wrapping_add(1))?;
    if req.dataset == DatasetId::MnistRegression {
        train = mnist_as_regression(&train)?;
        test = mnist_as_regression(&test)?;
    }
    train.split = SplitTag::Train;
    test.split = SplitTag::Test;
    Ok((train, test))
}
