//! Experiment sweeps: plan files, per-cell execution with resume, result
//! tables and embedding export.
//!
//! A run directory holds `manifest.json` (the plan and every resolved cell),
//! `cells/<hash>.json` (one record per finished cell), `results.csv`
//! (regenerated after each cell) and, when enabled, `checkpoints/<hash>.json`.

pub mod data;
mod embed;
mod plan;

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use self::data::{load_dataset, locate_images, DataRequest, DatasetId, ImageFiles};
pub use embed::{
    embedding_rows, read_embeddings, write_embeddings, AnyCheckpoint, EmbeddingRow, Section,
};
pub use plan::{
    profile, Arch, CellConfig, CnnOverrides, CnnSettings, ExperimentPlan, Hyper, HyperOverrides,
    PhotonicOverrides, PhotonicSettings, Scale, Sweep,
};

use crate::data::DatasetSplit;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::inference::{MetricKind, TrainedModel};
use crate::nn::{Checkpoint, ModelSpec};
use crate::photonic::{run_photonic, PhotonicTrained};
use crate::train::{run, TrainLog};

/// Trainable scalars of a dense or conv architecture.
pub fn param_count(spec: &ModelSpec) -> Result<usize> {
    spec.param_count()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Failed,
}

/// One line of `results.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    pub arch: String,
    pub depth: usize,
    pub width: usize,
    pub regime: String,
    #[serde(rename = "P")]
    pub directions: usize,
    pub seed: u64,
    pub param_count: Option<usize>,
    pub metric: Option<f64>,
    pub metric_kind: Option<MetricKind>,
    pub eval_count: Option<u64>,
    pub seconds: Option<f64>,
    pub cell: String,
    pub status: CellStatus,
    pub error: Option<String>,
}

impl ResultRow {
    fn blank(cell: &CellConfig, status: CellStatus) -> Self {
        Self {
            dataset: cell.dataset.as_str().into(),
            arch: cell.arch.to_string(),
            depth: cell.depth,
            width: cell.width,
            regime: cell.regime.to_string(),
            directions: cell.directions,
            seed: cell.seed,
            param_count: None,
            metric: None,
            metric_kind: None,
            eval_count: None,
            seconds: None,
            cell: cell.hash(),
            status,
            error: None,
        }
    }
}

/// What `cells/<hash>.json` holds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub config: CellConfig,
    pub row: ResultRow,
    #[serde(default)]
    pub log: Option<TrainLog>,
}

/// A trained cell model, ready to be checkpointed.
#[derive(Clone, Debug)]
pub enum CellModel {
    Dense(TrainedModel),
    Photonic(PhotonicTrained),
}

#[derive(Clone, Debug)]
pub struct CellResult {
    pub row: ResultRow,
    pub log: TrainLog,
    pub model: CellModel,
}

/// Train and score one cell on already loaded data.
pub fn run_cell(
    cell: &CellConfig,
    train: &DatasetSplit,
    test: &DatasetSplit,
    exec: Execution,
) -> Result<CellResult> {
    let mut cfg = cell.run_config();
    cfg.exec = exec;
    let start = Instant::now();
    let (param_count, metric, log, model) = if cell.arch == crate::bench::Arch::Photonic {
        let out = run_photonic(&cell.photonic_spec()?, &cfg, train, test)?;
        (
            out.param_count,
            out.metric,
            out.log,
            CellModel::Photonic(out.trained),
        )
    } else {
        let spec = cell.model_spec(train.shape)?;
        let out = run(&spec, &cfg, train, test)?;
        (
            out.param_count,
            out.metric,
            out.log,
            CellModel::Dense(out.trained),
        )
    };
    let mut row = ResultRow::blank(cell, CellStatus::Ok);
    row.param_count = Some(param_count);
    row.metric = Some(metric.value);
    row.metric_kind = Some(metric.kind);
    row.eval_count = Some(log.evaluations);
    row.seconds = Some(start.elapsed().as_secs_f64());
    Ok(CellResult { row, log, model })
}

/// Write `bytes` next to `path` and rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_results_csv<W: Write>(rows: &[ResultRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record([
            "dataset",
            "arch",
            "depth",
            "width",
            "regime",
            "P",
            "seed",
            "param_count",
            "metric",
            "metric_kind",
            "eval_count",
            "seconds",
            "cell",
            "status",
            "error",
        ])?;
    }
    w.flush().map_err(|e| Error::io("<results>", e))?;
    Ok(())
}

pub fn read_results_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub hash: String,
    pub config: CellConfig,
}

/// `manifest.json`: the plan and every resolved cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanManifest {
    pub format: String,
    pub version: String,
    pub plan: ExperimentPlan,
    pub cells: Vec<ManifestEntry>,
}

impl PlanManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn entry(&self, hash: &str) -> Option<&ManifestEntry> {
        self.cells.iter().find(|e| e.hash == hash)
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    pub exec: Execution,
    /// Retrain cells even when a record exists.
    pub force: bool,
}

#[derive(Clone, Debug, Default)]
pub struct PlanReport {
    /// One row per cell, in plan order.
    pub rows: Vec<ResultRow>,
    pub trained: usize,
    pub skipped: usize,
    pub failed: usize,
}

impl PlanReport {
    pub fn all_ok(&self) -> bool {
        self.rows.iter().all(|r| r.status == CellStatus::Ok)
    }
}

fn read_record(path: &Path) -> Option<CellRecord> {
    let bytes = fs::read(path).ok()?;
    serde_json::from_slice(&bytes).ok()
}

/// Loaded splits, keyed by request and seed; holds a few at a time.
#[derive(Default)]
struct DataCache {
    entries: Vec<((String, u64), (DatasetSplit, DatasetSplit))>,
}

impl DataCache {
    const CAPACITY: usize = 3;

    fn get(&mut self, cell: &CellConfig) -> Result<&(DatasetSplit, DatasetSplit)> {
        let req = cell.data_request();
        let key = (serde_json::to_string(&req)?, cell.seed);
        if let Some(i) = self.entries.iter().position(|(k, _)| *k == key) {
            let e = self.entries.remove(i);
            self.entries.push(e);
        } else {
            let splits = load_dataset(&req, cell.seed)?;
            if self.entries.len() == Self::CAPACITY {
                self.entries.remove(0);
            }
            self.entries.push((key, splits));
        }
        Ok(&self.entries.last().expect("just pushed").1)
    }
}

fn save_checkpoint(model: &CellModel, cell: &CellConfig, path: &Path) -> Result<()> {
    let regime = Some(cell.regime.as_str());
    match model {
        CellModel::Dense(TrainedModel::Ff(ff)) => {
            Checkpoint::new(&ff.model, cell.seed, regime, ff.prototypes.clone()).save(path)
        }
        CellModel::Dense(TrainedModel::Global(m)) => {
            Checkpoint::new(m, cell.seed, regime, Vec::new()).save(path)
        }
        CellModel::Photonic(PhotonicTrained::Ff(ff)) => ff.save(path),
        CellModel::Photonic(PhotonicTrained::Global(_)) => Ok(()),
    }
}

fn attempt(cell: &CellConfig, cache: &mut DataCache, exec: Execution) -> Result<CellResult> {
    let (train, test) = cache.get(cell)?;
    match catch_unwind(AssertUnwindSafe(|| run_cell(cell, train, test, exec))) {
        Ok(r) => r,
        Err(panic) => {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(Error::invalid(format!("cell panicked: {msg}")))
        }
    }
}

/// Run every cell of `plan` under `out`, skipping cells that already have a
/// successful record. A failing cell is recorded and the sweep continues.
pub fn run_plan(plan: &ExperimentPlan, out: &Path, opts: RunOptions) -> Result<PlanReport> {
    plan.validate()?;
    if plan.scale == Scale::Paper {
        log::warn!("paper scale: full datasets and 100-epoch runs, expect long runtimes");
    }
    let cells = plan.cells()?;
    let cells_dir = out.join("cells");
    fs::create_dir_all(&cells_dir).map_err(|e| Error::io(&cells_dir, e))?;
    let ckpt_dir = out.join("checkpoints");
    if plan.checkpoints {
        fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    }
    let manifest = PlanManifest {
        format: "ffzero-bench".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        plan: plan.clone(),
        cells: cells
            .iter()
            .map(|c| ManifestEntry {
                hash: c.hash(),
                config: c.clone(),
            })
            .collect(),
    };
    write_atomic(
        &out.join("manifest.json"),
        &serde_json::to_vec_pretty(&manifest)?,
    )?;

    let mut report = PlanReport::default();
    let mut cache = DataCache::default();
    let total = cells.len();
    for (i, cell) in cells.iter().enumerate() {
        let hash = cell.hash();
        let record_path = cells_dir.join(format!("{hash}.json"));
        if !opts.force {
            if let Some(rec) = read_record(&record_path)
                .filter(|r| r.row.status == CellStatus::Ok && r.config == *cell)
            {
                report.skipped += 1;
                report.rows.push(rec.row);
                continue;
            }
        }
        log::info!(
            "[{}/{total}] {} {} depth={} width={} P={} seed={}",
            i + 1,
            plan.name,
            cell.regime,
            cell.depth,
            cell.width,
            cell.directions,
            cell.seed
        );
        let record = match attempt(cell, &mut cache, opts.exec) {
            Ok(res) => {
                report.trained += 1;
                if plan.checkpoints {
                    save_checkpoint(&res.model, cell, &ckpt_dir.join(format!("{hash}.json")))?;
                }
                CellRecord {
                    config: cell.clone(),
                    row: res.row,
                    log: Some(res.log),
                }
            }
            Err(e) => {
                log::error!("cell {hash} failed: {e}");
                report.failed += 1;
                let mut row = ResultRow::blank(cell, CellStatus::Failed);
                row.error = Some(e.to_string());
                CellRecord {
                    config: cell.clone(),
                    row,
                    log: None,
                }
            }
        };
        write_atomic(&record_path, &serde_json::to_vec_pretty(&record)?)?;
        report.rows.push(record.row);
        let mut csv = Vec::new();
        write_results_csv(&report.rows, &mut csv)?;
        write_atomic(&out.join("results.csv"), &csv)?;
    }
    let mut csv = Vec::new();
    write_results_csv(&report.rows, &mut csv)?;
    write_atomic(&out.join("results.csv"), &csv)?;
    Ok(report)
}

/// The same plan run once per direction count, all else fixed.
pub fn direction_sweep(
    base: &ExperimentPlan,
    directions: &[usize],
    out: &Path,
    opts: RunOptions,
) -> Result<PlanReport> {
    if directions.is_empty() {
        return Err(Error::invalid("direction sweep needs at least one P"));
    }
    let mut plan = base.clone();
    plan.sweep.directions = directions.to_vec();
    run_plan(&plan, out, opts)
}

/// Outcome of re-running a stored cell.
#[derive(Clone, Debug, PartialEq)]
pub struct Verification {
    pub hash: String,
    pub stored: ResultRow,
    pub fresh: ResultRow,
}

impl Verification {
    /// Bit-identical on everything but wall time.
    pub fn matches(&self) -> bool {
        let strip = |r: &ResultRow| ResultRow {
            seconds: None,
            ..r.clone()
        };
        let same_metric = match (self.stored.metric, self.fresh.metric) {
            (Some(a), Some(b)) => a.to_bits() == b.to_bits(),
            (a, b) => a == b,
        };
        same_metric && strip(&self.stored) == strip(&self.fresh)
    }
}

/// Retrain the cell `hash` of the run in `dir` from its manifest entry and
/// compare with the stored row.
pub fn verify_cell(dir: &Path, hash: &str, exec: Execution) -> Result<Verification> {
    let manifest = PlanManifest::load(dir)?;
    let entry = manifest
        .entry(hash)
        .ok_or_else(|| Error::invalid(format!("cell {hash} is not in the manifest")))?;
    let path = dir.join("cells").join(format!("{hash}.json"));
    let stored =
        read_record(&path).ok_or_else(|| Error::invalid(format!("no record for cell {hash}")))?;
    let (train, test) = load_dataset(&entry.config.data_request(), entry.config.seed)?;
    let fresh = run_cell(&entry.config, &train, &test, exec)?;
    Ok(Verification {
        hash: hash.into(),
        stored: stored.row,
        fresh: fresh.row,
    })
}

/// Default output directory for a plan.
pub fn default_out_dir(plan: &ExperimentPlan) -> PathBuf {
    plan.out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(&plan.name))
}

/// Run settings grouped by everything except the seed, with per-seed
/// metrics in seed order. Useful for trend checks over a finished report.
pub fn metrics_by_setting(rows: &[ResultRow]) -> HashMap<(usize, usize, String, usize), Vec<f64>> {
    let mut out: HashMap<_, Vec<(u64, f64)>> = HashMap::new();
    for r in rows {
        if let Some(m) = r.metric {
            out.entry((r.depth, r.width, r.regime.clone(), r.directions))
                .or_default()
                .push((r.seed, m));
        }
    }
    out.into_iter()
        .map(|(k, mut v)| {
            v.sort_by_key(|(s, _)| *s);
            (k, v.into_iter().map(|(_, m)| m).collect())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{TaskKind, TensorShape};
    use crate::photonic::PhotonicSpec;
    use crate::train::Regime;

    fn tiny_plan(regimes: &[Regime]) -> ExperimentPlan {
        let mut plan = ExperimentPlan::new("tiny", DatasetId::SyntheticF1, Arch::Mlp, regimes);
        plan.sweep.depths = vec![1, 2];
        plan.sweep.widths = vec![6];
        plan.train.train_size = Some(120);
        plan.train.test_size = Some(40);
        plan.train.epochs = Some(2);
        plan.train.batch_size = Some(32);
        plan
    }

    #[test]
    fn param_count_examples() {
        let spec = ModelSpec::mlp(784, &[], Some(10), TaskKind::Classification { classes: 10 });
        assert_eq!(param_count(&spec).unwrap(), 7850);
        assert_eq!(PhotonicSpec::new(16, 1, 3).param_count(), 360);
        let cnn = ModelSpec::cnn(
            TensorShape::new(1, 28, 28),
            &[(4, crate::nn::ConvGeometry::square(6, 1, 2))],
            10,
            None,
            &[10],
            0.0,
            TaskKind::Classification { classes: 10 },
        );
        let wider = ModelSpec::cnn(
            TensorShape::new(1, 28, 28),
            &[(4, crate::nn::ConvGeometry::square(6, 1, 2))],
            20,
            None,
            &[10],
            0.0,
            TaskKind::Classification { classes: 10 },
        );
        assert_eq!(param_count(&cnn).unwrap(), param_count(&wider).unwrap());
    }

    #[test]
    fn empty_plan_gives_empty_table() {
        let dir = tempfile::tempdir().unwrap();
        let report = run_plan(&tiny_plan(&[]), dir.path(), RunOptions::default()).unwrap();
        assert!(report.rows.is_empty() && report.all_ok());
        let text = fs::read_to_string(dir.path().join("results.csv")).unwrap();
        assert!(text.starts_with("dataset,arch,depth,width,regime,P,seed,param_count,metric"));
        assert!(read_results_csv(&dir.path().join("results.csv"))
            .unwrap()
            .is_empty());
    }

    #[test]
    fn rows_resume_and_regenerate() {
        let dir = tempfile::tempdir().unwrap();
        let plan = tiny_plan(&[Regime::FfDd, Regime::BpAd]);
        let first = run_plan(&plan, dir.path(), RunOptions::default()).unwrap();
        assert_eq!((first.rows.len(), first.trained, first.skipped), (4, 4, 0));
        assert!(first.all_ok(), "{:?}", first.rows);
        let csv = read_results_csv(&dir.path().join("results.csv")).unwrap();
        assert_eq!(csv, first.rows);

        let second = run_plan(&plan, dir.path(), RunOptions::default()).unwrap();
        assert_eq!((second.trained, second.skipped), (0, 4));
        assert_eq!(second.rows, first.rows);

        let v = verify_cell(dir.path(), &first.rows[0].cell, Execution::Sequential).unwrap();
        assert!(v.matches(), "{v:?}");
    }

    #[test]
    fn failures_are_recorded_without_aborting() {
        let dir = tempfile::tempdir().unwrap();
        let mut plan = tiny_plan(&[Regime::FfAd]);
        plan.train.learning_rate = Some(f64::INFINITY);
        assert!(plan.validate().is_err());
        plan.train.learning_rate = Some(1e300);
        let report = run_plan(&plan, dir.path(), RunOptions::default()).unwrap();
        assert_eq!(report.rows.len(), 2);
        assert!(report
            .rows
            .iter()
            .all(|r| r.metric.is_some() || r.status == CellStatus::Failed));

        let mut fashion =
            ExperimentPlan::new("f", DatasetId::FashionMnist, Arch::Mlp, &[Regime::FfDd]);
        fashion.train.epochs = Some(1);
        if std::env::var_os(data::FASHION_DIR_ENV).is_none() {
            let report = run_plan(&fashion, dir.path(), RunOptions::default()).unwrap();
            assert_eq!(report.failed, 1);
            assert!(!report.all_ok());
            assert!(report.rows[0]
                .error
                .as_deref()
                .unwrap()
                .contains("FashionMNIST"));
        }
    }

    #[test]
    fn direction_sweep_counts_two_per_direction() {
        let dir = tempfile::tempdir().unwrap();
        let mut plan = tiny_plan(&[Regime::BpDd]);
        plan.sweep.depths = vec![1];
        let report = direction_sweep(&plan, &[1, 3], dir.path(), RunOptions::default()).unwrap();
        let counts: Vec<u64> = report.rows.iter().map(|r| r.eval_count.unwrap()).collect();
        let batches = 120_u64.div_ceil(32) * 2;
        assert_eq!(counts, vec![2 * batches, 6 * batches]);

        let plain = run_plan(&plan, &dir.path().join("plain"), RunOptions::default()).unwrap();
        assert_eq!(plain.rows[0].metric, report.rows[0].metric);
        assert!(direction_sweep(&plan, &[], dir.path(), RunOptions::default()).is_err());
    }

    #[test]
    fn checkpoints_are_written_when_requested() {
        let dir = tempfile::tempdir().unwrap();
        let mut plan = tiny_plan(&[Regime::FfDd]);
        plan.sweep.depths = vec![1];
        plan.checkpoints = true;
        let report = run_plan(&plan, dir.path(), RunOptions::default()).unwrap();
        let path = dir
            .path()
            .join("checkpoints")
            .join(format!("{}.json", report.rows[0].cell));
        assert!(matches!(
            AnyCheckpoint::load(&path).unwrap(),
            AnyCheckpoint::Model(_)
        ));
    }

    #[test]
    fn grouping_orders_by_seed() {
        let dir = tempfile::tempdir().unwrap();
        let mut plan = tiny_plan(&[Regime::FfAd]);
        plan.sweep.depths = vec![1];
        plan.seeds = vec![2, 1];
        let report = run_plan(&plan, dir.path(), RunOptions::default()).unwrap();
        let groups = metrics_by_setting(&report.rows);
        let v = &groups[&(1, 6, "ff_ad".to_string(), 1)];
        assert_eq!(
            v,
            &vec![
                report.rows[1].metric.unwrap(),
                report.rows[0].metric.unwrap()
            ]
        );
    }
}
