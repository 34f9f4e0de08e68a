use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ffzero::bench::{
    self, embedding_rows, load_dataset, profile, write_embeddings, AnyCheckpoint, Arch,
    DataRequest, DatasetId, ExperimentPlan, ImageFiles, PlanReport, RunOptions, Scale,
};
use ffzero::data::{generate_synthetic, write_synthetic_csv, SyntheticFunction, SyntheticSpec};
use ffzero::exec::Execution;
use ffzero::prototype::{random_rotation, PrototypeSet};
use ffzero::rng::{stream, Stream};

#[derive(Parser)]
#[command(
    name = "ffzero",
    version,
    about = "Forward-forward training with directional-derivative gradients"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Seed; replaces the plan's seed list when given.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Scale profile (desk or paper).
    #[arg(long, global = true, value_parser = parse_scale)]
    scale: Option<Scale>,
    /// Output directory (or file, for single-file outputs).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run inner loops on one thread.
    #[arg(long, global = true)]
    sequential: bool,
}

impl Common {
    fn exec(&self) -> Execution {
        if self.sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        }
    }
}

fn parse_scale(s: &str) -> std::result::Result<Scale, String> {
    Scale::parse(s).map_err(|e| e.to_string())
}

#[derive(Subcommand)]
enum Command {
    /// Benchmark sweeps.
    Bench {
        #[command(subcommand)]
        command: BenchCommand,
    },
    /// Prototype sets.
    Prototypes {
        #[command(subcommand)]
        command: PrototypeCommand,
    },
    /// Datasets.
    Data {
        #[command(subcommand)]
        command: DataCommand,
    },
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Run every cell of a plan file, resuming finished cells.
    Run {
        plan: PathBuf,
        /// Retrain cells that already have a record.
        #[arg(long)]
        force: bool,
    },
    /// Run a plan once per direction count.
    Directions {
        plan: PathBuf,
        /// Direction counts, comma separated.
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 4])]
        p: Vec<usize>,
        #[arg(long)]
        force: bool,
    },
    /// Export tap vectors and prototypes of a checkpoint on a dataset's test split.
    Embed {
        checkpoint: PathBuf,
        /// Dataset id: mnist, mnist_regression, fashion_mnist, synthetic_f1, synthetic_f2.
        dataset: String,
        /// Samples to export.
        #[arg(long, default_value_t = 1000)]
        limit: usize,
    },
    /// Retrain stored cells from the manifest and compare bit for bit.
    Verify {
        dir: PathBuf,
        /// Cell hashes; all rows when omitted.
        cells: Vec<String>,
    },
}

#[derive(Subcommand)]
enum PrototypeCommand {
    /// Write a (randomly rotated) simplex prototype set as CSV.
    Gen {
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        dim: usize,
        /// Keep the canonical orientation.
        #[arg(long)]
        no_rotate: bool,
    },
}

#[derive(Subcommand)]
enum DataCommand {
    /// Generate a synthetic regression dataset as train.csv and test.csv.
    Synth {
        #[arg(long, value_parser = ["f1", "f2"], default_value = "f1")]
        function: String,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
    },
    /// Locate and parse the image datasets.
    FetchCheck,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// `Ok(false)` means the command ran but something it checked failed.
fn dispatch(cli: &Cli) -> Result<bool> {
    let c = &cli.common;
    match &cli.command {
        Command::Bench { command } => match command {
            BenchCommand::Run { plan, force } => {
                let (plan, out) = load_plan(plan, c)?;
                let opts = RunOptions {
                    exec: c.exec(),
                    force: *force,
                };
                Ok(summarize(&bench::run_plan(&plan, &out, opts)?, &out))
            }
            BenchCommand::Directions { plan, p, force } => {
                let (plan, out) = load_plan(plan, c)?;
                let opts = RunOptions {
                    exec: c.exec(),
                    force: *force,
                };
                Ok(summarize(
                    &bench::direction_sweep(&plan, p, &out, opts)?,
                    &out,
                ))
            }
            BenchCommand::Embed {
                checkpoint,
                dataset,
                limit,
            } => embed(checkpoint, dataset, *limit, c),
            BenchCommand::Verify { dir, cells } => verify(dir, cells, c.exec()),
        },
        Command::Prototypes {
            command:
                PrototypeCommand::Gen {
                    classes,
                    dim,
                    no_rotate,
                },
        } => {
            let mut set = PrototypeSet::simplex(*classes, *dim)?;
            if !no_rotate {
                let r =
                    random_rotation(*dim, &mut stream(c.seed.unwrap_or(0), Stream::Prototypes))?;
                set = set.rotate(&r)?;
            }
            match &c.out {
                Some(path) => set.save(path)?,
                None => set.write_csv(std::io::stdout().lock())?,
            }
            Ok(true)
        }
        Command::Data { command } => match command {
            DataCommand::Synth {
                function,
                n_train,
                n_test,
            } => {
                let f = if function == "f1" {
                    SyntheticFunction::F1
                } else {
                    SyntheticFunction::F2
                };
                let mut spec = SyntheticSpec::new(f, c.seed.unwrap_or(0));
                spec.n_train = n_train.unwrap_or(spec.n_train);
                spec.n_test = n_test.unwrap_or(spec.n_test);
                let (train, test) = generate_synthetic(&spec)?;
                let dir = c
                    .out
                    .clone()
                    .unwrap_or_else(|| PathBuf::from(format!("data/synthetic_{function}")));
                std::fs::create_dir_all(&dir)
                    .with_context(|| format!("creating {}", dir.display()))?;
                write_synthetic_csv(&train, &spec, &dir.join("train.csv"))?;
                write_synthetic_csv(&test, &spec, &dir.join("test.csv"))?;
                println!(
                    "wrote {} train and {} test rows to {}",
                    train.len(),
                    test.len(),
                    dir.display()
                );
                Ok(true)
            }
            DataCommand::FetchCheck => fetch_check(),
        },
    }
}

fn load_plan(path: &Path, c: &Common) -> Result<(ExperimentPlan, PathBuf)> {
    let mut plan =
        ExperimentPlan::load(path).with_context(|| format!("reading plan {}", path.display()))?;
    if let Some(seed) = c.seed {
        plan.seeds = vec![seed];
    }
    if let Some(scale) = c.scale {
        plan.scale = scale;
    }
    plan.validate()?;
    let out = c
        .out
        .clone()
        .unwrap_or_else(|| bench::default_out_dir(&plan));
    Ok((plan, out))
}

fn summarize(report: &PlanReport, out: &Path) -> bool {
    println!(
        "{} cells: {} trained, {} resumed, {} failed; results in {}",
        report.rows.len(),
        report.trained,
        report.skipped,
        report.failed,
        out.join("results.csv").display()
    );
    for r in report.rows.iter().filter(|r| r.error.is_some()) {
        eprintln!(
            "cell {} failed: {}",
            r.cell,
            r.error.as_deref().unwrap_or("")
        );
    }
    report.all_ok()
}

fn embed(checkpoint: &Path, dataset: &str, limit: usize, c: &Common) -> Result<bool> {
    let ck = AnyCheckpoint::load(checkpoint)
        .with_context(|| format!("loading {}", checkpoint.display()))?;
    let id = DatasetId::parse(dataset)?;
    let scale = c.scale.unwrap_or_default();
    let (arch, downsample, classes) = match &ck {
        AnyCheckpoint::Photonic(ff) => {
            let ports = ff.network.spec.ports;
            let side = (ports as f64).sqrt().round() as usize;
            if side * side != ports || side == 0 || 28 % side != 0 {
                bail!("cannot map 28x28 images onto {ports} ports");
            }
            (Arch::Photonic, 28 / side, Some(ff.network.spec.classes))
        }
        AnyCheckpoint::Model(_) => (Arch::Mlp, 1, None),
    };
    let hyper = profile(id, arch, scale);
    let req = DataRequest {
        dataset: id,
        train_size: hyper.train_size,
        test_size: hyper.test_size,
        paper_scale: scale == Scale::Paper,
        downsample,
        classes,
    };
    let (_, test) = load_dataset(&req, c.seed.unwrap_or(0))?;
    let rows = embedding_rows(&ck, &test, Some(limit), c.exec())?;
    let path = c
        .out
        .clone()
        .unwrap_or_else(|| checkpoint.with_extension("embeddings.csv"));
    let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    write_embeddings(&rows, BufWriter::new(file))?;
    println!("wrote {} rows to {}", rows.len(), path.display());
    Ok(true)
}

fn verify(dir: &Path, cells: &[String], exec: Execution) -> Result<bool> {
    let hashes: Vec<String> = if cells.is_empty() {
        bench::read_results_csv(&dir.join("results.csv"))?
            .into_iter()
            .map(|r| r.cell)
            .collect()
    } else {
        cells.to_vec()
    };
    let mut ok = true;
    for h in &hashes {
        let v = bench::verify_cell(dir, h, exec)?;
        let same = v.matches();
        ok &= same;
        println!("{} {h}", if same { "identical" } else { "DIFFERS" });
    }
    Ok(ok)
}

fn fetch_check() -> Result<bool> {
    let mut ok = true;
    for id in [DatasetId::Mnist, DatasetId::FashionMnist] {
        match bench::locate_images(id) {
            Ok(files) => {
                let kind = match &files {
                    ImageFiles::Official { .. } => "full dataset",
                    ImageFiles::Subset { .. } => "bundled 10k subset",
                };
                let (train, test) = bench::data::load_image_pools(id, false)?;
                println!(
                    "{}: {kind}, {} train / {} test images",
                    id.as_str(),
                    train.len(),
                    test.len()
                );
            }
            Err(e) if id == DatasetId::Mnist => {
                println!("{}: missing ({e})", id.as_str());
                ok = false;
            }
            Err(e) => println!("{}: not available ({e})", id.as_str()),
        }
    }
    Ok(ok)
}
