use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sparamx::format::Dtype;
use sparamx_cli::bench::{run_bench, write_csv, BenchConfig, KernelKind};
use sparamx_cli::convert::{convert, ConvertOptions};
use sparamx_cli::default_workers;
use sparamx_cli::report::report;

#[derive(Parser)]
#[command(
    name = "sparamx",
    about = "Bitmap-compressed sparse CPU kernels: converter, bench, report",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Prune a raw dense tensor and pack it into a .spx file.
    Convert(ConvertArgs),
    /// Time kernels over shapes, sparsities, and workers; emit CSV.
    Bench(BenchArgs),
    /// Summarize a bench CSV as markdown tables with speedups.
    Report(ReportArgs),
}

#[derive(Args)]
struct ConvertArgs {
    /// Raw dense tensor (u32 rows, u32 cols, u8 dtype, row-major data).
    #[arg(long)]
    input: PathBuf,
    /// Output .spx path.
    #[arg(long)]
    output: PathBuf,
    /// Fraction of smallest-magnitude weights to prune.
    #[arg(long, default_value_t = 0.0)]
    sparsity: f32,
    /// Packed element type: bf16 or int8.
    #[arg(long, default_value = "bf16")]
    dtype: String,
    /// Worker count frozen into the tensor's cursors.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated kernels: dense, sparse, vector_sparse, int8_dense,
    /// int8_sparse, attention.
    #[arg(long, value_delimiter = ',', default_value = "dense,sparse")]
    kernel: Vec<String>,

    /// Batch rows (decode = 1).
    #[arg(long, default_value_t = 1)]
    m: usize,
    /// Inner dimension; omit with --n to sweep the default shape catalog.
    #[arg(long)]
    k: Option<usize>,
    /// Output columns.
    #[arg(long)]
    n: Option<usize>,

    /// Bench weights from a converted .spx file instead of generating them.
    #[arg(long)]
    weights: Option<PathBuf>,

    /// Comma-separated sparsity fractions.
    #[arg(long, value_delimiter = ',', default_value = "0.0,0.5")]
    sparsity: Vec<f32>,
    /// V pruning rate for attention (K rate comes from --sparsity).
    #[arg(long)]
    v_sparsity: Option<f32>,

    #[arg(long, default_value_t = 32)]
    heads: usize,
    #[arg(long, default_value_t = 8)]
    kv_heads: usize,
    #[arg(long, default_value_t = 128)]
    head_dim: usize,
    /// Static context length for the attention bench.
    #[arg(long, default_value_t = 512)]
    context: usize,

    /// Worker threads (default: SPARAMX_THREADS, else all cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Neuron groups for the vector kernel.
    #[arg(long, default_value_t = sparamx::kernel::DEFAULT_NEURON_GROUPS)]
    groups: usize,
    /// Element type consistency check: bf16 or int8 (derived from kernel).
    #[arg(long)]
    dtype: Option<String>,

    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, default_value_t = 2)]
    warmup: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,

    /// CSV output path (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Bench CSV to summarize.
    #[arg(long)]
    input: PathBuf,
    /// Markdown output path (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_dtype(s: &str) -> Result<Dtype, String> {
    match s {
        "bf16" => Ok(Dtype::Bf16),
        "int8" => Ok(Dtype::Int8),
        other => Err(format!("unknown dtype {other} (expected bf16 or int8)")),
    }
}

fn run() -> Result<(), String> {
    match Cli::parse().command {
        Command::Convert(args) => {
            let dtype = parse_dtype(&args.dtype)?;
            let summary = convert(&ConvertOptions {
                input: args.input,
                output: args.output,
                sparsity: args.sparsity,
                dtype,
                workers: args.workers.unwrap_or_else(default_workers),
                clamp_workers: args.workers.is_none(),
            })
            .map_err(|e| e.to_string())?;
            println!(
                "packed {}x{}: nnz {} ({:.2}% kept), {} bytes compressed vs {} dense \
                 (ratio {:.4}), {} workers",
                summary.rows,
                summary.cols,
                summary.nnz,
                100.0 * summary.nnz as f64 / (summary.rows * summary.cols) as f64,
                summary.compressed_bytes,
                summary.dense_bytes,
                summary.ratio(),
                summary.workers,
            );
            Ok(())
        }
        Command::Bench(args) => {
            let kernels: Vec<KernelKind> = args
                .kernel
                .iter()
                .map(|s| KernelKind::parse(s).map_err(|e| e.to_string()))
                .collect::<Result<_, _>>()?;
            if let Some(dt) = &args.dtype {
                let dt = parse_dtype(dt)?;
                for k in &kernels {
                    if k.dtype() != dt {
                        return Err(format!("--dtype conflicts with kernel {}", k.as_str()));
                    }
                }
            }
            let shapes = match (args.k, args.n) {
                (Some(k), Some(n)) => vec![(format!("{k}x{n}"), k, n)],
                (None, None) => Vec::new(),
                _ => return Err("--k and --n must be given together".into()),
            };
            let config = BenchConfig {
                kernels,
                m: args.m,
                shapes,
                weights: args.weights,
                sparsities: args.sparsity,
                v_sparsity: args.v_sparsity,
                heads: args.heads,
                kv_heads: args.kv_heads,
                head_dim: args.head_dim,
                context: args.context,
                workers: args.workers.unwrap_or_else(default_workers),
                groups: args.groups,
                reps: args.reps,
                warmup: args.warmup,
                seed: args.seed,
            };
            let rows = run_bench(&config).map_err(|e| e.to_string())?;
            match args.out {
                Some(path) => {
                    let mut f = std::fs::File::create(path).map_err(|e| e.to_string())?;
                    write_csv(&rows, &mut f).map_err(|e| e.to_string())?;
                }
                None => {
                    let mut stdout = std::io::stdout().lock();
                    write_csv(&rows, &mut stdout).map_err(|e| e.to_string())?;
                }
            }
            Ok(())
        }
        Command::Report(args) => {
            let csv = std::fs::read_to_string(&args.input).map_err(|e| e.to_string())?;
            let md = report(&csv).map_err(|e| e.to_string())?;
            match args.out {
                Some(path) => std::fs::write(path, md).map_err(|e| e.to_string())?,
                None => {
                    let mut stdout = std::io::stdout().lock();
                    stdout.write_all(md.as_bytes()).map_err(|e| e.to_string())?;
                }
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
