use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod error;

use config::RunConfig;
use error::CliError;

/// KAN and MLP autoencoders for implicit-feedback recommendation.
///
/// Settings are resolved in order: built-in defaults, the `--config` JSON
/// file (flat dotted keys such as "model.latent"), `KANREC_*` environment
/// variables (e.g. KANREC_MODEL_LATENT), then command-line flags.
#[derive(Debug, Parser)]
#[command(name = "kanrec", version)]
struct Cli {
    /// JSON config file with flat dotted keys
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Worker threads for evaluation and matrix kernels [default: all cores]
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    /// Log more (-v progress, -vv per-epoch detail)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Split, train, evaluate on the test split; writes a checkpoint, eval JSON and history CSV
    Train(TrainCmd),
    /// Evaluate a checkpoint on the test split of a dataset
    Eval(EvalCmd),
    /// Base training plus block-wise fine-tuning; writes the accuracy matrix and LA/RA/H-mean
    Continual(ContinualCmd),
    /// Prune a KAN checkpoint and explain one item's recommendation
    Explain(ExplainCmd),
    /// Train while recording per-step parameter deltas; writes one CSV per snapshot
    Trace(TraceCmd),
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Interaction file
    #[arg(long, value_name = "PATH")]
    data: Option<String>,
    /// auto, csv, tsv or movielens (`::`-separated) [default: auto, by extension]
    #[arg(long)]
    format: Option<String>,
    /// Field delimiter, overriding the format's
    #[arg(long)]
    delimiter: Option<String>,
    /// The file starts with a header row [default: false]
    #[arg(long)]
    header: bool,
    /// User column, index or header name [default: 0]
    #[arg(long)]
    user_col: Option<String>,
    /// Item column, index or header name [default: 1]
    #[arg(long)]
    item_col: Option<String>,
    /// Rating column [default: none; 2 for movielens]
    #[arg(long)]
    rating_col: Option<String>,
    /// Timestamp column [default: none; 3 for movielens]
    #[arg(long)]
    time_col: Option<String>,
    /// Drop rows rated below this [default: keep all]
    #[arg(long)]
    min_rating: Option<String>,
    /// Train,validation,test ratios [default: 0.8,0.1,0.1]
    #[arg(long)]
    ratios: Option<String>,
}

impl DataArgs {
    fn flags(&self) -> Vec<(&'static str, Option<String>)> {
        vec![
            ("data.path", self.data.clone()),
            ("data.format", self.format.clone()),
            ("data.delimiter", self.delimiter.clone()),
            ("data.header", self.header.then(|| "true".into())),
            ("data.user_col", self.user_col.clone()),
            ("data.item_col", self.item_col.clone()),
            ("data.rating_col", self.rating_col.clone()),
            ("data.time_col", self.time_col.clone()),
            ("data.min_rating", self.min_rating.clone()),
            ("split.ratios", self.ratios.clone()),
        ]
    }
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// kan or mlp; mlp widths are scaled to match the kan parameter count [default: kan]
    #[arg(long)]
    kind: Option<String>,
    /// Layers in each of the encoder and decoder [default: 1]
    #[arg(long)]
    layers: Option<String>,
    /// Spline grid intervals G [default: 2]
    #[arg(long)]
    grids: Option<String>,
    /// Spline order k [default: 3]
    #[arg(long)]
    order: Option<String>,
    /// Latent width [default: 512]
    #[arg(long)]
    latent: Option<String>,
    /// Base activation: silu, elu, tanh or relu [default: silu]
    #[arg(long)]
    activation: Option<String>,
    /// Reconstruction loss: mse or bce [default: mse]
    #[arg(long)]
    loss: Option<String>,
    /// Weight of the sparsity regularizer [default: 0]
    #[arg(long)]
    lambda: Option<String>,
    /// Lower end of the spline grid [default: -1]
    #[arg(long, allow_hyphen_values = true)]
    grid_min: Option<String>,
    /// Upper end of the spline grid [default: 1]
    #[arg(long, allow_hyphen_values = true)]
    grid_max: Option<String>,
}

impl ModelArgs {
    fn flags(&self) -> Vec<(&'static str, Option<String>)> {
        vec![
            ("model.kind", self.kind.clone()),
            ("model.layers", self.layers.clone()),
            ("model.grids", self.grids.clone()),
            ("model.order", self.order.clone()),
            ("model.latent", self.latent.clone()),
            ("model.activation", self.activation.clone()),
            ("model.loss", self.loss.clone()),
            ("model.lambda", self.lambda.clone()),
            ("model.grid_min", self.grid_min.clone()),
            ("model.grid_max", self.grid_max.clone()),
        ]
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Mini-batch size [default: 256]
    #[arg(long)]
    batch_size: Option<String>,
    /// Adam learning rate [default: 0.001]
    #[arg(long)]
    lr: Option<String>,
    /// Maximum epochs [default: 100]
    #[arg(long)]
    epochs: Option<String>,
    /// Epochs without validation improvement before stopping; 0 disables [default: 10]
    #[arg(long)]
    patience: Option<String>,
    /// Global gradient-norm cap [default: none]
    #[arg(long)]
    clip: Option<String>,
    /// Cutoff of the validation recall used for model selection [default: 20]
    #[arg(long)]
    select_k: Option<String>,
}

impl TrainArgs {
    fn flags(&self) -> Vec<(&'static str, Option<String>)> {
        vec![
            ("train.batch_size", self.batch_size.clone()),
            ("train.lr", self.lr.clone()),
            ("train.epochs", self.epochs.clone()),
            ("train.patience", self.patience.clone()),
            ("train.clip", self.clip.clone()),
            ("train.select_k", self.select_k.clone()),
        ]
    }
}

#[derive(Debug, Args)]
struct OutArgs {
    /// Evaluation cutoffs [default: 10,20]
    #[arg(long)]
    k_eval: Option<String>,
    /// Seed for splits, initialization and shuffling [default: 0]
    #[arg(long)]
    seed: Option<String>,
    /// Output directory [default: kanrec-out]
    #[arg(long, short)]
    output: Option<String>,
}

impl OutArgs {
    fn flags(&self) -> Vec<(&'static str, Option<String>)> {
        vec![("eval.ks", self.k_eval.clone()), ("seed", self.seed.clone()), ("output", self.output.clone())]
    }
}

#[derive(Debug, Args)]
struct TrackArgs {
    /// Layer whose parameters are tracked, an index or "output" [default: output]
    #[arg(long)]
    track_layer: Option<String>,
    /// Tracked output nodes [default: 10]
    #[arg(long)]
    track_rows: Option<String>,
    /// Tracked input nodes [default: 10]
    #[arg(long)]
    track_cols: Option<String>,
    /// Snapshot every N optimizer steps [default: 1]
    #[arg(long)]
    track_every: Option<String>,
}

impl TrackArgs {
    fn flags(&self) -> Vec<(&'static str, Option<String>)> {
        vec![
            ("trace.layer", self.track_layer.clone()),
            ("trace.rows", self.track_rows.clone()),
            ("trace.cols", self.track_cols.clone()),
            ("trace.every", self.track_every.clone()),
        ]
    }
}

#[derive(Debug, Args)]
struct TrainCmd {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args)]
struct EvalCmd {
    /// Checkpoint written by `train`
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args)]
struct ContinualCmd {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    out: OutArgs,
    /// Fraction of interactions, by time, in the base block [default: 0.5]
    #[arg(long)]
    base_fraction: Option<String>,
    /// Incremental blocks [default: 5]
    #[arg(long)]
    blocks: Option<String>,
    /// Epoch budget per incremental block [default: --epochs]
    #[arg(long)]
    block_epochs: Option<String>,
    /// Recall cutoff of the accuracy matrix [default: 20]
    #[arg(long)]
    k: Option<String>,
    /// Also record parameter deltas across the whole run [default: false]
    #[arg(long)]
    trace: bool,
    #[command(flatten)]
    track: TrackArgs,
}

#[derive(Debug, Args)]
struct ExplainCmd {
    /// KAN checkpoint written by `train`
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    out: OutArgs,
    /// Item id, as it appears in the data file
    #[arg(long)]
    item: String,
    /// Node threshold tau1 [default: 0.1]
    #[arg(long)]
    tau1: Option<String>,
    /// Edge threshold tau2 [default: 0.09]
    #[arg(long)]
    tau2: Option<String>,
    /// Influencing items to list [default: 10]
    #[arg(long)]
    top: Option<String>,
    /// Users sampled for the reference batch [default: all training users]
    #[arg(long)]
    sample: Option<String>,
}

#[derive(Debug, Args)]
struct TraceCmd {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    out: OutArgs,
    #[command(flatten)]
    track: TrackArgs,
}

fn resolve(file: Option<&PathBuf>, flags: Vec<(&'static str, Option<String>)>) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = file {
        cfg.apply_file(path)?;
    }
    cfg.apply_env()?;
    cfg.apply_flags(flags)?;
    cfg.validate()?;
    Ok(cfg)
}

fn configure_threads(threads: Option<usize>) -> Result<(), CliError> {
    let Some(n) = threads else { return Ok(()) };
    if n == 0 {
        return Err(CliError::Config("--threads must be >= 1".into()));
    }
    // Read by the matrix kernels on first use.
    std::env::set_var("MATMUL_NUM_THREADS", n.to_string());
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(format!("cannot size the thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads(cli.threads)?;
    let file = cli.config.as_ref();
    match cli.command {
        Command::Train(c) => {
            let flags = [c.data.flags(), c.model.flags(), c.train.flags(), c.out.flags()].concat();
            commands::train(&resolve(file, flags)?)
        }
        Command::Eval(c) => {
            let flags = [c.data.flags(), c.out.flags()].concat();
            commands::eval(&resolve(file, flags)?, &c.checkpoint)
        }
        Command::Continual(c) => {
            let mut flags = [c.data.flags(), c.model.flags(), c.train.flags(), c.out.flags(), c.track.flags()].concat();
            flags.extend([
                ("continual.base_fraction", c.base_fraction),
                ("continual.blocks", c.blocks),
                ("train.block_epochs", c.block_epochs),
                ("continual.k", c.k),
                ("trace.enabled", c.trace.then(|| "true".into())),
            ]);
            commands::continual(&resolve(file, flags)?)
        }
        Command::Explain(c) => {
            let mut flags = [c.data.flags(), c.out.flags()].concat();
            flags.extend([
                ("explain.tau1", c.tau1),
                ("explain.tau2", c.tau2),
                ("explain.top", c.top),
                ("explain.sample", c.sample),
            ]);
            commands::explain(&resolve(file, flags)?, &c.checkpoint, &c.item)
        }
        Command::Trace(c) => {
            let flags = [c.data.flags(), c.model.flags(), c.train.flags(), c.out.flags(), c.track.flags()].concat();
            commands::trace(&resolve(file, flags)?)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_env("KANREC_LOG").format_timestamp(None).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(1)
        }
    }
}
