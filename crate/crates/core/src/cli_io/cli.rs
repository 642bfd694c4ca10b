use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use super::config::{ConfigError, DatasetKind, RunConfig};
use super::csv_out::{self, SummaryRow};
use super::{atomic_write, gen_synthetic, load_mnist, DataError, Dataset};
use crate::pipeline::{
    compress_model, compression_ratio, decompress_model, evaluate, export_histograms, train, CompressedModel,
    HeaderAccounting, PipelineError, TrainedModel,
};
use crate::pruning::{fraction_grid, prune_sweep, PruneError, PruneStrategy};

#[derive(Parser, Debug)]
#[command(name = "miracle", about = "Variational weight compression with minimal random coding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Run configuration (`key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the `seed` key.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the `output_dir` key.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a posterior; writes train.json and trace.csv.
    Train(Common),
    /// Blockwise-compress a checkpoint; writes model.mrcl.
    Compress {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Decode a compressed model to raw little-endian f64 weights.
    Decompress {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Test accuracy of a compressed model or of raw weights.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, conflicts_with = "weights")]
        model: Option<PathBuf>,
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Compress a checkpoint and sweep all pruning strategies; writes sweep.csv.
    PruneSweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Posterior means and log-stds per weight; writes histograms.csv.
    Histograms {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train, compress and evaluate every (block size, seed) pair; writes
    /// summary.csv and one model file per run.
    Repro(Common),
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(_) => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<PruneError> for CliError {
    fn from(e: PruneError) -> Self {
        CliError::Data(e.to_string())
    }
}

struct Context {
    cfg: RunConfig,
    out: PathBuf,
}

fn load_context(c: &Common) -> Result<Context, CliError> {
    let text = fs::read_to_string(&c.config).map_err(|e| CliError::Usage(format!("{}: {e}", c.config.display())))?;
    let mut cfg = RunConfig::parse(&text)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    let out = c.out_dir.clone().unwrap_or_else(|| cfg.output_dir.clone());
    Ok(Context { cfg, out })
}

fn load_data(cfg: &RunConfig) -> Result<(Dataset, Dataset), CliError> {
    let (train_set, test_set) = match cfg.dataset {
        DatasetKind::Mnist => match load_mnist(&cfg.data_dir, cfg.downsample) {
            Ok(d) => d,
            Err(DataError::Missing(p)) => {
                eprintln!("note: {} not found; using synthetic blobs", p.display());
                gen_synthetic(cfg.synthetic_points, cfg.synthetic_classes, cfg.synthetic_dim, cfg.seed)?
            }
            Err(e) => return Err(e.into()),
        },
        DatasetKind::Synthetic => gen_synthetic(cfg.synthetic_points, cfg.synthetic_classes, cfg.synthetic_dim, cfg.seed)?,
    };
    let (train_set, test_set) = (train_set.take(cfg.train_limit), test_set.take(cfg.test_limit));
    if cfg.layers[0] != train_set.dim() {
        return Err(CliError::Data(format!("data has {} features but layers start at {}", train_set.dim(), cfg.layers[0])));
    }
    Ok((train_set, test_set))
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    atomic_write(path, bytes)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn read_checkpoint(path: &Path) -> Result<TrainedModel, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn read_model(path: &Path) -> Result<CompressedModel, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    CompressedModel::from_bytes(&bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn cmd_train(c: &Common) -> Result<(), CliError> {
    let ctx = load_context(c)?;
    let spec = ctx.cfg.model_spec().map_err(|e| CliError::Usage(e.to_string()))?;
    let (train_set, _) = load_data(&ctx.cfg)?;
    let (model, trace) = train(&spec, &train_set, &ctx.cfg.train_config())?;
    let json = serde_json::to_vec(&model).map_err(|e| CliError::Data(e.to_string()))?;
    write(&ctx.out.join("train.json"), &json)?;
    write(&ctx.out.join("trace.csv"), &csv_out::trace_csv(&trace, &csv_out::provenance(&ctx.cfg)))
}

fn cmd_compress(c: &Common, checkpoint: &Path) -> Result<(), CliError> {
    let ctx = load_context(c)?;
    let model = read_checkpoint(checkpoint)?;
    let (train_set, _) = load_data(&ctx.cfg)?;
    let outcome = compress_model(&model, &train_set)?;
    let bytes = outcome.model.to_bytes().map_err(PipelineError::from)?;
    write(&ctx.out.join("model.mrcl"), &bytes)
}

fn cmd_decompress(model: &Path, out: &Path) -> Result<(), CliError> {
    let weights = decompress_model(&read_model(model)?)?;
    let bytes: Vec<u8> = weights.iter().flat_map(|w| w.to_le_bytes()).collect();
    write(out, &bytes)
}

fn cmd_evaluate(c: &Common, model: Option<&Path>, weights: Option<&Path>) -> Result<(), CliError> {
    let ctx = load_context(c)?;
    let spec = ctx.cfg.model_spec().map_err(|e| CliError::Usage(e.to_string()))?;
    let w = match (model, weights) {
        (Some(m), _) => {
            let cm = read_model(m)?;
            if cm.spec != spec {
                return Err(CliError::Data("model architecture differs from the configuration".into()));
            }
            decompress_model(&cm)?
        }
        (None, Some(p)) => {
            let bytes = fs::read(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
            if bytes.len() % 8 != 0 {
                return Err(CliError::Data(format!("{}: length is not a multiple of 8", p.display())));
            }
            bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect()
        }
        (None, None) => return Err(CliError::Usage("evaluate needs --model or --weights".into())),
    };
    let (_, test_set) = load_data(&ctx.cfg)?;
    let s = evaluate(&spec, &w, &test_set)?;
    println!("accuracy={} error={}", s.accuracy, s.error);
    Ok(())
}

fn cmd_prune_sweep(c: &Common, checkpoint: &Path) -> Result<(), CliError> {
    let ctx = load_context(c)?;
    let model = read_checkpoint(checkpoint)?;
    let (train_set, test_set) = load_data(&ctx.cfg)?;
    let outcome = compress_model(&model, &train_set)?;
    let curves = prune_sweep(
        &outcome.weights,
        Some(&outcome.posterior),
        &PruneStrategy::all(ctx.cfg.seed),
        &fraction_grid(20),
        &model.spec,
        &test_set,
    )?;
    let tagged: Vec<_> = curves.into_iter().map(|c| (ctx.cfg.seed, c)).collect();
    write(&ctx.out.join("sweep.csv"), &csv_out::sweep_csv(&tagged, &csv_out::provenance(&ctx.cfg)))
}

fn cmd_histograms(c: &Common, checkpoint: &Path) -> Result<(), CliError> {
    let ctx = load_context(c)?;
    let rows = export_histograms(&read_checkpoint(checkpoint)?)?;
    write(&ctx.out.join("histograms.csv"), &csv_out::histogram_csv(&rows, &csv_out::provenance(&ctx.cfg)))
}

fn cmd_repro(c: &Common) -> Result<(), CliError> {
    let ctx = load_context(c)?;
    let spec = ctx.cfg.model_spec().map_err(|e| CliError::Usage(e.to_string()))?;
    let (train_set, test_set) = load_data(&ctx.cfg)?;
    let sizes = if ctx.cfg.repro_block_sizes.is_empty() { vec![ctx.cfg.block_size] } else { ctx.cfg.repro_block_sizes.clone() };
    let mut rows = Vec::new();
    for &block_size in &sizes {
        let (mut errors, mut ratios, mut iters) = (Vec::new(), Vec::new(), Vec::new());
        for &s in &ctx.cfg.seeds {
            let seed = ctx.cfg.seed.wrapping_add(s);
            let tc = crate::pipeline::TrainConfig { block_size, seed, ..ctx.cfg.train_config() };
            let (model, _) = train(&spec, &train_set, &tc)?;
            let outcome = compress_model(&model, &train_set)?;
            let bytes = outcome.model.to_bytes().map_err(PipelineError::from)?;
            write(&ctx.out.join(format!("repro_bs{block_size}_seed{seed}.mrcl")), &bytes)?;
            let w = decompress_model(&outcome.model)?;
            errors.push(evaluate(&spec, &w, &test_set)?.error);
            ratios.push(compression_ratio(spec.param_count(), 32, &outcome.model, HeaderAccounting::Exclude));
            iters.push((tc.max_iters + outcome.gate_steps) as f64);
        }
        let (error_mean, error_stderr) = csv_out::mean_stderr(&errors);
        rows.push(SummaryRow {
            block_size,
            ratio: csv_out::mean_stderr(&ratios).0,
            error_mean,
            error_stderr,
            iters: csv_out::mean_stderr(&iters).0,
        });
    }
    let mut comments = csv_out::provenance(&ctx.cfg);
    comments.push("ratio = 32-bit parameters / index payload bits (header excluded)".into());
    comments.push("iters = training iterations plus budget-gate annealing steps".into());
    write(&ctx.out.join("summary.csv"), &csv_out::summary_csv(&rows, &comments))
}

/// Runs the command line `argv` (program name first) and returns the
/// process exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Train(c) => cmd_train(c),
        Command::Compress { common, checkpoint } => cmd_compress(common, checkpoint),
        Command::Decompress { model, out } => cmd_decompress(model, out),
        Command::Evaluate { common, model, weights } => cmd_evaluate(common, model.as_deref(), weights.as_deref()),
        Command::PruneSweep { common, checkpoint } => cmd_prune_sweep(common, checkpoint),
        Command::Histograms { common, checkpoint } => cmd_histograms(common, checkpoint),
        Command::Repro(c) => cmd_repro(c),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            match &e {
                CliError::Usage(m) => eprintln!("error: {m}"),
                CliError::Data(m) => eprintln!("error: {m}"),
            }
            e.code()
        }
    }
}
