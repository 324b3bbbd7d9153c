//! Command-line harness: generate dataset files, build indexes, and run
//! timed workloads that report per-phase CSV rows.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use spindex::bench::{self, IndexKind, Workload, WorkloadConfig};
use spindex::datagen::{
    self, default_domain, gen_sweepline, gen_uniform, gen_varden, Dataset, VardenParams,
};
use spindex::{Error, Result};

#[derive(Parser)]
#[command(name = "spindex", version, about = "Spatial index workload harness")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum IndexArg {
    /// Parallel orth-tree.
    Porth,
    /// Curve-keyed balanced tree, Hilbert order.
    SpacH,
    /// Curve-keyed balanced tree, Morton order.
    SpacZ,
}

impl From<IndexArg> for IndexKind {
    fn from(a: IndexArg) -> IndexKind {
        match a {
            IndexArg::Porth => IndexKind::Porth,
            IndexArg::SpacH => IndexKind::SpacH,
            IndexArg::SpacZ => IndexKind::SpacZ,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DistArg {
    Uniform,
    Varden,
    Sweepline,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Spatial dimensions when generating (2 or 3).
    #[arg(long, default_value_t = 2)]
    dims: usize,

    /// Dataset file to load instead of generating.
    #[arg(long)]
    data: Option<PathBuf>,

    /// Points to generate.
    #[arg(long, default_value_t = 100_000)]
    n: usize,

    /// Generator distribution.
    #[arg(long, value_enum, default_value_t = DistArg::Uniform)]
    dist: DistArg,

    /// Generator and query-sampling seed.
    #[arg(long, default_value_t = 42)]
    seed: u64,

    /// Collapse coordinate duplicates to their first occurrence.
    #[arg(long)]
    dedup: bool,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    data: DataArgs,

    /// Index family to run.
    #[arg(long, value_enum, default_value_t = IndexArg::Porth)]
    index: IndexArg,

    /// Batch size as a fraction of the dataset for incremental schedules.
    #[arg(long, default_value_t = 0.01)]
    batch_ratio: f64,

    /// Neighbors per nearest-neighbor query.
    #[arg(long, default_value_t = 10)]
    k: usize,

    /// Queries per query phase (half nearest-neighbor, half range).
    #[arg(long, default_value_t = 1000)]
    queries: usize,

    /// Target output size of a range query on uniform data.
    #[arg(long, default_value_t = 100)]
    range_size: usize,

    /// Sample query points uniformly from the domain instead of the data.
    #[arg(long)]
    ood: bool,

    /// Worker threads (default: all hardware threads).
    #[arg(long)]
    threads: Option<usize>,

    /// Run structural audits after the build and after every batch.
    #[arg(long)]
    audit: bool,

    /// Check every query against a reference scan of the live points.
    #[arg(long)]
    verify: bool,

    /// Write the report to this file instead of stdout.
    #[arg(long)]
    csv: Option<PathBuf>,

    /// Timed repetitions; above 1 an extra warm-up run precedes them.
    #[arg(long, default_value_t = 1)]
    repeat: usize,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a dataset file.
    Gen {
        #[command(flatten)]
        data: DataArgs,
        /// Output path for the dataset file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Bulk build, then a query phase.
    Build(RunArgs),
    /// Build empty, insert in batches with a mid-schedule query phase.
    IncInsert(RunArgs),
    /// Bulk build, delete in batches with a mid-schedule query phase.
    IncDelete(RunArgs),
    /// Bulk build, report query throughput.
    Query(RunArgs),
}

fn main() {
    if let Err(e) = real_main() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn real_main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Gen { data, out } => dispatch_dims(&data, |d| match d {
            2 => gen_cmd::<2>(&data, &out),
            _ => gen_cmd::<3>(&data, &out),
        }),
        Cmd::Build(a) => run_cmd(a, Workload::Build),
        Cmd::IncInsert(a) => run_cmd(a, Workload::IncInsert),
        Cmd::IncDelete(a) => run_cmd(a, Workload::IncDelete),
        Cmd::Query(a) => run_cmd(a, Workload::Query),
    }
}

/// Resolves the dimension count (from the file header when loading) and
/// forwards to the matching const-generic instantiation.
fn dispatch_dims(data: &DataArgs, f: impl FnOnce(usize) -> Result<()>) -> Result<()> {
    let dims = match &data.data {
        Some(path) => bench::read_dataset_dims(path)?,
        None => data.dims,
    };
    if dims != 2 && dims != 3 {
        return Err(Error::Config(format!("unsupported dimension count {dims} (use 2 or 3)")));
    }
    f(dims)
}

fn load_or_generate<const D: usize>(data: &DataArgs) -> Result<Dataset<D>> {
    let mut ds = match &data.data {
        Some(path) => bench::read_dataset::<D>(path)?,
        None => {
            let domain = default_domain::<D>();
            match data.dist {
                DistArg::Uniform => gen_uniform(data.n, domain, data.seed),
                DistArg::Sweepline => gen_sweepline(data.n, domain, data.seed),
                DistArg::Varden => {
                    gen_varden(data.n, domain, data.seed, VardenParams::for_domain(&domain))
                }
            }
        }
    };
    if data.dedup {
        ds.points = datagen::dedup_points(std::mem::take(&mut ds.points));
    }
    Ok(ds)
}

fn gen_cmd<const D: usize>(data: &DataArgs, out: &PathBuf) -> Result<()> {
    let ds = load_or_generate::<D>(data)?;
    bench::write_dataset(out, &ds)?;
    eprintln!("wrote {} points ({}d) to {}", ds.points.len(), D, out.display());
    Ok(())
}

fn run_cmd(args: RunArgs, workload: Workload) -> Result<()> {
    dispatch_dims(&args.data, |d| match d {
        2 => run_sized::<2>(&args, workload),
        _ => run_sized::<3>(&args, workload),
    })
}

fn run_sized<const D: usize>(args: &RunArgs, workload: Workload) -> Result<()> {
    let ds = load_or_generate::<D>(&args.data)?;
    let cfg = WorkloadConfig {
        index: args.index.into(),
        workload,
        batch_ratio: args.batch_ratio,
        k: args.k,
        queries: args.queries,
        range_size: args.range_size,
        ood: args.ood,
        audit: args.audit,
        verify: args.verify,
        repeat: args.repeat,
        seed: args.data.seed,
    };
    let report = match args.threads {
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            pool.install(|| bench::run(&cfg, &ds))?
        }
        None => bench::run(&cfg, &ds)?,
    };
    let csv = report.to_csv();
    match &args.csv {
        Some(path) => std::fs::write(path, &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}
