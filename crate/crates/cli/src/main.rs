use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

mod commands;

use commands::Failure;

#[derive(Parser)]
#[command(name = "adaptkit", version, about = "Train, package, publish and run bottleneck adapters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an adapter (or the full model) on a toy task and save the results.
    Train(TrainArgs),
    /// Predict one label per input line with a checkpoint and an adapter.
    Run(RunArgs),
    /// Zip a package with its configuration and metadata, then verify the archive.
    Pack(PackArgs),
    /// Validate hub metadata files or verify zip archives.
    Validate(ValidateArgs),
    /// Build the hub index from metadata files.
    Index(IndexArgs),
    /// Print the explore tree of an index.
    Explore(ExploreArgs),
    /// Resolve a name fragment against an index for a model.
    Search(SearchArgs),
}

#[derive(Args, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainArgs {
    /// YAML or JSON file whose keys (flag names with underscores) provide defaults.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// desk, base, large, or a model descriptor file.
    #[arg(long)]
    pub model_config: Option<String>,
    #[arg(long)]
    pub adapter_name: Option<String>,
    /// Preset name or an adapter descriptor file.
    #[arg(long)]
    pub adapter_config: Option<String>,
    #[arg(long)]
    pub adapter_type: Option<String>,
    #[arg(long)]
    pub reduction_factor: Option<usize>,
    #[arg(long)]
    pub task: Option<String>,
    /// adapter_only or full_finetune.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    #[arg(long)]
    pub model_checkpoint: PathBuf,
    /// Package path, or a name resolved through --index.
    #[arg(long)]
    pub adapter: Option<String>,
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Expected adapter configuration: preset name or config hash.
    #[arg(long)]
    pub config: Option<String>,
    #[arg(long)]
    pub head: Option<String>,
    /// One sequence per line: space-separated token ids, optionally a tab and a gold label.
    #[arg(long)]
    pub input_file: PathBuf,
}

#[derive(Args, Debug)]
pub struct PackArgs {
    #[arg(long)]
    pub package: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Level-2 category for the hub metadata file.
    #[arg(long)]
    pub category: Option<String>,
    /// Level-3 dataset for the hub metadata file.
    #[arg(long)]
    pub dataset: Option<String>,
    /// Public url of the archive; defaults to its file:// url.
    #[arg(long)]
    pub url: Option<String>,
    #[arg(long)]
    pub description: Option<String>,
    #[arg(long)]
    pub author: Option<String>,
    /// Where to write the hub metadata file (default: next to the archive).
    #[arg(long)]
    pub metadata_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ValidateArgs {
    /// Metadata `.yaml` files or `.zip` archives.
    #[arg(required = true)]
    pub paths: Vec<PathBuf>,
}

#[derive(Args, Debug)]
pub struct IndexArgs {
    /// Metadata files, or directories searched for `*.yaml` / `*.yml`.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ExploreArgs {
    #[arg(long)]
    pub index: PathBuf,
    /// task or language.
    #[arg(long)]
    pub level1: Option<String>,
    #[arg(long)]
    pub level2: Option<String>,
}

#[derive(Args, Debug)]
pub struct SearchArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub query: String,
    #[arg(long)]
    pub model_hash: String,
    #[arg(long)]
    pub config: Option<String>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Run(a) => commands::run(a),
        Command::Pack(a) => commands::pack(a),
        Command::Validate(a) => commands::validate(a),
        Command::Index(a) => commands::index(a),
        Command::Explore(a) => commands::explore(a),
        Command::Search(a) => commands::search(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure { code, message }) => {
            eprintln!("error: {message}");
            ExitCode::from(code)
        }
    }
}
