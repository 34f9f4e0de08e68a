use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Axis};
use serde::Deserialize;

use crate::data::{DatasetSplit, Targets};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::nn::Checkpoint;
use crate::photonic::PhotonicFf;
use crate::prototype::{PrototypeSet, TapPrototypes};

/// A checkpoint of either model family.
#[derive(Clone, Debug)]
pub enum AnyCheckpoint {
    Model(Checkpoint),
    Photonic(PhotonicFf),
}

impl AnyCheckpoint {
    /// Load a dense/conv or photonic checkpoint, dispatching on its `format`.
    pub fn load(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Peek {
            format: String,
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let peek: Peek = serde_json::from_str(&text)?;
        if peek.format == crate::nn::checkpoint::CHECKPOINT_FORMAT {
            Checkpoint::load(path).map(AnyCheckpoint::Model)
        } else {
            PhotonicFf::load(path).map(AnyCheckpoint::Photonic)
        }
    }

    fn taps_and_prototypes(
        &self,
        x: &Array2<f64>,
        exec: Execution,
    ) -> Result<(Vec<Array2<f64>>, Vec<TapPrototypes>)> {
        match self {
            AnyCheckpoint::Model(ck) => {
                let model = ck.model()?;
                let fwd = model.forward_with_taps(x.view(), exec)?;
                Ok((fwd.unit_taps().cloned().collect(), ck.prototypes.clone()))
            }
            AnyCheckpoint::Photonic(ff) => Ok((
                ff.embeddings(x.view())?,
                ff.prototypes
                    .iter()
                    .cloned()
                    .map(TapPrototypes::Classification)
                    .collect(),
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Section {
    Tap,
    Prototype,
}

impl Section {
    fn as_str(self) -> &'static str {
        match self {
            Section::Tap => "tap",
            Section::Prototype => "prototype",
        }
    }
}

/// One exported vector.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub section: Section,
    pub tap: usize,
    /// Sample index, or class index for prototypes (0 = lower, 1 = upper
    /// for regression pairs).
    pub index: usize,
    pub label: String,
    pub values: Vec<f64>,
}

fn target_label(targets: &Targets, i: usize) -> String {
    match targets {
        Targets::Classes { labels, .. } => labels[i].to_string(),
        Targets::Values(v) => v[i].to_string(),
    }
}

fn prototype_rows(tap: usize, protos: &TapPrototypes) -> Vec<EmbeddingRow> {
    let row = |index, label: String, values: Vec<f64>| EmbeddingRow {
        section: Section::Prototype,
        tap,
        index,
        label,
        values,
    };
    match protos {
        TapPrototypes::Classification(set) => class_rows(set)
            .map(|(c, v)| row(c, c.to_string(), v))
            .collect(),
        TapPrototypes::Regression(pair) => vec![
            row(0, "lower".into(), pair.lower.to_vec()),
            row(1, "upper".into(), pair.upper.to_vec()),
        ],
    }
}

fn class_rows(set: &PrototypeSet) -> impl Iterator<Item = (usize, Vec<f64>)> + '_ {
    (0..set.num_classes()).map(|c| (c, set.prototype(c).to_vec()))
}

/// Every tap vector of the first `limit` samples of `data` (sample-major
/// within each tap), followed by each tap's prototype vectors.
pub fn embedding_rows(
    ck: &AnyCheckpoint,
    data: &DatasetSplit,
    limit: Option<usize>,
    exec: Execution,
) -> Result<Vec<EmbeddingRow>> {
    let n = limit.unwrap_or(data.len()).min(data.len());
    let x = data.inputs.slice(ndarray::s![..n, ..]).to_owned();
    let (taps, prototypes) = ck.taps_and_prototypes(&x, exec)?;
    let mut rows = Vec::with_capacity(n * taps.len());
    for (t, tap) in taps.iter().enumerate() {
        for (i, v) in tap.axis_iter(Axis(0)).enumerate() {
            rows.push(EmbeddingRow {
                section: Section::Tap,
                tap: t,
                index: i,
                label: target_label(&data.targets, i),
                values: v.to_vec(),
            });
        }
    }
    for (t, p) in prototypes.iter().enumerate() {
        rows.extend(prototype_rows(t, p));
    }
    Ok(rows)
}

/// CSV with columns `section,tap,index,label` then the vector components;
/// rows differ in width when taps do.
pub fn write_embeddings<W: Write>(rows: &[EmbeddingRow], writer: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(writer);
    w.write_record(["section", "tap", "index", "label", "values"])?;
    for r in rows {
        let mut rec = vec![
            r.section.as_str().to_string(),
            r.tap.to_string(),
            r.index.to_string(),
            r.label.clone(),
        ];
        rec.extend(r.values.iter().map(|v| format!("{v:?}")));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<embeddings>", e))?;
    Ok(())
}

pub fn read_embeddings<R: Read>(reader: R) -> Result<Vec<EmbeddingRow>> {
    let mut r = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let bad = |m: &str| Error::Format(format!("embedding csv: {m}"));
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() < 4 {
            return Err(bad("short row"));
        }
        let section = match &rec[0] {
            "tap" => Section::Tap,
            "prototype" => Section::Prototype,
            other => return Err(bad(&format!("unknown section `{other}`"))),
        };
        let int = |s: &str| s.parse::<usize>().map_err(|_| bad("bad index"));
        let values = rec
            .iter()
            .skip(4)
            .map(|s| s.parse::<f64>().map_err(|_| bad("bad value")))
            .collect::<Result<Vec<_>>>()?;
        rows.push(EmbeddingRow {
            section,
            tap: int(&rec[1])?,
            index: int(&rec[2])?,
            label: rec[3].to_string(),
            values,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::FfModel;
    use crate::nn::{init_parameters, ModelSpec, TaskKind};
    use crate::photonic::{PhotonicNetwork, PhotonicSpec};
    use crate::rng::seeded;
    use crate::train::assign_prototypes;
    use crate::train::fixtures::blobs;

    fn dense_checkpoint() -> AnyCheckpoint {
        let spec = ModelSpec::mlp(4, &[6, 5], Some(3), TaskKind::Classification { classes: 3 });
        let model = init_parameters(&spec, &mut seeded(0)).unwrap();
        let protos = assign_prototypes(&spec, &mut seeded(1)).unwrap();
        let ff = FfModel::new(model, protos).unwrap();
        AnyCheckpoint::Model(Checkpoint::new(&ff.model, 0, Some("ff_dd"), ff.prototypes))
    }

    #[test]
    fn row_counts_follow_samples_taps_and_classes() {
        let data = blobs(20, 3, 4, 0);
        let rows =
            embedding_rows(&dense_checkpoint(), &data, Some(7), Execution::Sequential).unwrap();
        let taps = rows.iter().filter(|r| r.section == Section::Tap).count();
        let protos = rows
            .iter()
            .filter(|r| r.section == Section::Prototype)
            .count();
        assert_eq!(taps, 7 * 3);
        assert_eq!(protos, 3 * 3);
        assert!(rows
            .iter()
            .filter(|r| r.tap == 0)
            .all(|r| r.values.len() == 6));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let data = blobs(10, 3, 4, 2);
        let rows = embedding_rows(&dense_checkpoint(), &data, None, Execution::Sequential).unwrap();
        let mut buf = Vec::new();
        write_embeddings(&rows, &mut buf).unwrap();
        assert_eq!(read_embeddings(buf.as_slice()).unwrap(), rows);
    }

    #[test]
    fn checkpoints_of_both_families_load() {
        let dir = tempfile::tempdir().unwrap();
        let dense = dir.path().join("dense.json");
        let AnyCheckpoint::Model(ck) = dense_checkpoint() else {
            unreachable!()
        };
        ck.save(&dense).unwrap();
        assert!(matches!(
            AnyCheckpoint::load(&dense).unwrap(),
            AnyCheckpoint::Model(_)
        ));

        let spec = PhotonicSpec::new(4, 2, 2);
        let net = PhotonicNetwork::random(spec.clone(), &mut seeded(0)).unwrap();
        let protos = PhotonicFf::random_prototypes(&spec, &mut seeded(1)).unwrap();
        let ff = PhotonicFf::new(net, protos).unwrap();
        let path = dir.path().join("mesh.json");
        ff.save(&path).unwrap();
        let loaded = AnyCheckpoint::load(&path).unwrap();
        let data = blobs(5, 2, 4, 0);
        let rows = embedding_rows(&loaded, &data, None, Execution::Sequential).unwrap();
        assert_eq!(rows.len(), 5 * 2 + 2 * 2);
    }
}
