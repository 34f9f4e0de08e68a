use std::path::Path;
use std::process::{Command, Output};

use ffzero::bench::{read_embeddings, read_results_csv, CellStatus, Section};
use ffzero::prototype::{separation_error, PrototypeSet};

fn ffzero(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ffzero"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_plan(dir: &Path, body: &str) -> String {
    let path = dir.join("plan.toml");
    std::fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

const TINY: &str = r#"
name = "tiny"
dataset = "synthetic_f1"
arch = "mlp"
regimes = ["ff_dd", "bp_ad"]
seeds = [0]
checkpoints = true

[sweep]
depths = [1, 2]
widths = [8]

[train]
train_size = 200
test_size = 50
epochs = 2
"#;

#[test]
fn run_writes_one_row_per_cell_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let plan = write_plan(dir.path(), TINY);
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap();
    let first = ffzero(&["bench", "run", &plan, "--out", out_s]);
    assert!(
        first.status.success(),
        "{}",
        String::from_utf8_lossy(&first.stderr)
    );
    let rows = read_results_csv(&out.join("results.csv")).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows
        .iter()
        .all(|r| r.status == CellStatus::Ok && r.metric.is_some()));
    assert!(out.join("manifest.json").is_file());

    let again = ffzero(&["bench", "run", &plan, "--out", out_s]);
    assert!(again.status.success());
    assert!(String::from_utf8_lossy(&again.stdout).contains("0 trained, 4 resumed"));
    assert_eq!(read_results_csv(&out.join("results.csv")).unwrap(), rows);

    let verify = ffzero(&["bench", "verify", out_s]);
    assert!(verify.status.success());
    assert_eq!(
        String::from_utf8_lossy(&verify.stdout)
            .matches("identical")
            .count(),
        4
    );
}

#[test]
fn seed_flag_replaces_the_seed_list() {
    let dir = tempfile::tempdir().unwrap();
    let plan = write_plan(dir.path(), TINY);
    let out = dir.path().join("out");
    let status = ffzero(&[
        "bench",
        "run",
        &plan,
        "--seed",
        "7",
        "--out",
        out.to_str().unwrap(),
    ])
    .status;
    assert!(status.success());
    let rows = read_results_csv(&out.join("results.csv")).unwrap();
    assert!(rows.iter().all(|r| r.seed == 7));
}

#[test]
fn failed_cells_make_the_exit_code_nonzero() {
    if std::env::var_os("FFZERO_FASHION_MNIST_DIR").is_some() {
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let plan = write_plan(dir.path(), &TINY.replace("synthetic_f1", "fashion_mnist"));
    let out = dir.path().join("out");
    let o = ffzero(&["bench", "run", &plan, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let rows = read_results_csv(&out.join("results.csv")).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows
        .iter()
        .all(|r| r.status == CellStatus::Failed && r.error.is_some()));
}

#[test]
fn invalid_plans_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    let plan = write_plan(dir.path(), &TINY.replace("widths = [8]", "widths = [0]"));
    assert_eq!(ffzero(&["bench", "run", &plan]).status.code(), Some(2));
    assert_eq!(
        ffzero(&["bench", "run", "/no/such/plan.toml"])
            .status
            .code(),
        Some(2)
    );
    assert!(!ffzero(&["bench", "run", &plan, "--scale", "huge"])
        .status
        .success());
}

#[test]
fn direction_sweep_runs_each_p() {
    let dir = tempfile::tempdir().unwrap();
    let plan = write_plan(
        dir.path(),
        &TINY
            .replace("\"ff_dd\", \"bp_ad\"", "\"ff_dd\"")
            .replace("[1, 2]", "[1]"),
    );
    let out = dir.path().join("out");
    let o = ffzero(&[
        "bench",
        "directions",
        &plan,
        "--p",
        "1,3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let rows = read_results_csv(&out.join("results.csv")).unwrap();
    assert_eq!(
        rows.iter().map(|r| r.directions).collect::<Vec<_>>(),
        vec![1, 3]
    );
    assert_eq!(rows[1].eval_count.unwrap(), 3 * rows[0].eval_count.unwrap());
}

#[test]
fn embed_exports_taps_and_prototypes() {
    let dir = tempfile::tempdir().unwrap();
    let plan = write_plan(
        dir.path(),
        &TINY
            .replace("\"ff_dd\", \"bp_ad\"", "\"ff_dd\"")
            .replace("[1, 2]", "[2]"),
    );
    let out = dir.path().join("out");
    assert!(
        ffzero(&["bench", "run", &plan, "--out", out.to_str().unwrap()])
            .status
            .success()
    );
    let row = &read_results_csv(&out.join("results.csv")).unwrap()[0];
    let ck = out.join("checkpoints").join(format!("{}.json", row.cell));
    let csv = dir.path().join("emb.csv");
    let o = ffzero(&[
        "bench",
        "embed",
        ck.to_str().unwrap(),
        "synthetic_f1",
        "--limit",
        "9",
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_embeddings(std::fs::File::open(&csv).unwrap()).unwrap();
    assert_eq!(
        rows.iter().filter(|r| r.section == Section::Tap).count(),
        9 * 2
    );
    assert_eq!(
        rows.iter()
            .filter(|r| r.section == Section::Prototype)
            .count(),
        2 * 2
    );
}

#[test]
fn prototype_and_data_generators_write_files() {
    let dir = tempfile::tempdir().unwrap();
    let protos = dir.path().join("p.csv");
    let o = ffzero(&[
        "prototypes",
        "gen",
        "--classes",
        "4",
        "--dim",
        "6",
        "--seed",
        "3",
        "--out",
        protos.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let set = PrototypeSet::load(&protos).unwrap();
    assert_eq!((set.num_classes(), set.dim()), (4, 6));
    assert!(separation_error(&set) < 1e-10);

    let data = dir.path().join("syn");
    let o = ffzero(&[
        "data",
        "synth",
        "--function",
        "f2",
        "--n-train",
        "30",
        "--n-test",
        "10",
        "--out",
        data.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let (train, spec) = ffzero::data::read_synthetic_csv(&data.join("train.csv")).unwrap();
    assert_eq!((train.len(), spec.n_test), (30, 10));
}

#[test]
fn fetch_check_reports_mnist() {
    let o = ffzero(&["data", "fetch-check"]);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("mnist:"), "{text}");
    assert_eq!(o.status.success(), !text.contains("mnist: missing"));
}
