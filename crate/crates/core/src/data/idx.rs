use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use ndarray::Array2;

use super::{DatasetSplit, SplitTag, Targets};
use crate::error::{Error, Result};
use crate::nn::TensorShape;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

/// File contents, transparently gunzipped when the gzip signature is present.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn header(bytes: &[u8], path: &Path, magic: u32, dims: usize) -> Result<Vec<usize>> {
    let head = 4 + 4 * dims;
    if bytes.len() < 4 {
        return Err(Error::IdxTruncated {
            path: path.into(),
            actual: bytes.len(),
            needed: head,
        });
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(Error::IdxMagic {
            path: path.into(),
            found,
            expected: magic,
        });
    }
    if bytes.len() < head {
        return Err(Error::IdxTruncated {
            path: path.into(),
            actual: bytes.len(),
            needed: head,
        });
    }
    let dims: Vec<usize> = (0..dims)
        .map(|i| be_u32(bytes, 4 + 4 * i) as usize)
        .collect();
    let needed = head + dims.iter().product::<usize>();
    if bytes.len() < needed {
        return Err(Error::IdxTruncated {
            path: path.into(),
            actual: bytes.len(),
            needed,
        });
    }
    Ok(dims)
}

/// Read an unsigned-byte image file; pixels are scaled to `[0, 1]`.
pub fn load_idx_images(path: &Path) -> Result<(Array2<f64>, TensorShape)> {
    let bytes = read_maybe_gz(path)?;
    let dims = header(&bytes, path, IMAGE_MAGIC, 3)?;
    let (n, h, w) = (dims[0], dims[1], dims[2]);
    let pixels = &bytes[16..16 + n * h * w];
    let inputs = Array2::from_shape_fn((n, h * w), |(i, j)| pixels[i * h * w + j] as f64 / 255.0);
    Ok((inputs, TensorShape::new(1, h, w)))
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = read_maybe_gz(path)?;
    let dims = header(&bytes, path, LABEL_MAGIC, 1)?;
    Ok(bytes[8..8 + dims[0]].iter().map(|&b| b as usize).collect())
}

/// Load an image/label pair of IDX files (plain or gzipped) as a ten-class
/// split tagged `train`.
pub fn load_idx(images: &Path, labels: &Path) -> Result<DatasetSplit> {
    let (inputs, shape) = load_idx_images(images)?;
    let labels = load_idx_labels(labels)?;
    if labels.len() != inputs.nrows() {
        return Err(Error::IdxCountMismatch {
            images: inputs.nrows(),
            labels: labels.len(),
        });
    }
    if let Some(&y) = labels.iter().find(|&&y| y > 9) {
        return Err(Error::InvalidLabel(y));
    }
    DatasetSplit::new(
        inputs,
        shape,
        Targets::Classes {
            labels,
            num_classes: 10,
        },
        SplitTag::Train,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use flate2::write::GzEncoder;
    use flate2::Compression;
    use std::io::Write;

    fn image_file(n: u32, h: u32, w: u32, payload: &[u8]) -> Vec<u8> {
        let mut b = IMAGE_MAGIC.to_be_bytes().to_vec();
        for d in [n, h, w] {
            b.extend(d.to_be_bytes());
        }
        b.extend(payload);
        b
    }

    fn label_file(labels: &[u8]) -> Vec<u8> {
        let mut b = LABEL_MAGIC.to_be_bytes().to_vec();
        b.extend((labels.len() as u32).to_be_bytes());
        b.extend(labels);
        b
    }

    #[test]
    fn reads_plain_and_gzipped() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lab = dir.path().join("lab.gz");
        fs::write(&img, image_file(2, 2, 2, &[0, 255, 51, 102, 1, 2, 3, 4])).unwrap();
        let mut gz = GzEncoder::new(Vec::new(), Compression::default());
        gz.write_all(&label_file(&[7, 3])).unwrap();
        fs::write(&lab, gz.finish().unwrap()).unwrap();
        let d = load_idx(&img, &lab).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.shape, TensorShape::new(1, 2, 2));
        assert_eq!(d.inputs[[0, 1]], 1.0);
        assert_eq!(d.inputs[[0, 2]], 0.2);
        assert_eq!(d.targets.labels().unwrap(), &[7, 3]);
    }

    #[test]
    fn distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lab = dir.path().join("lab");
        fs::write(&lab, label_file(&[1, 2, 3])).unwrap();

        let mut bad = image_file(1, 1, 1, &[0]);
        bad[3] = 0x01;
        fs::write(&img, bad).unwrap();
        assert!(matches!(load_idx(&img, &lab), Err(Error::IdxMagic { .. })));

        fs::write(&img, image_file(3, 2, 2, &[0; 5])).unwrap();
        assert!(matches!(
            load_idx(&img, &lab),
            Err(Error::IdxTruncated { .. })
        ));

        fs::write(&img, image_file(2, 1, 1, &[0, 0])).unwrap();
        assert!(matches!(
            load_idx(&img, &lab),
            Err(Error::IdxCountMismatch {
                images: 2,
                labels: 3
            })
        ));
    }
}
