use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

use config::Settings;

/// Split fine-tuning of a small transformer across an edge and a cloud
/// process.
///
/// Every subcommand reads an optional flat `key = value` file given by
/// `--config`; any key can be overridden with trailing `--key value` or
/// `--key=value` arguments. Set SFT_LOG to error, info or debug for logs.
///
/// Exit codes: 0 success, 2 bad configuration or a rejected handshake,
/// 3 connection failure, 4 failure during training or output.
#[derive(Debug, Parser)]
#[command(name = "sft", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train locally, over an in-process link, or as one end of a TCP split.
    ///
    /// Keys: role (local|loopback|edge|cloud), decompose, split_layer, rank,
    /// residual (eliminated|kept-local|kept-transfer), model shape keys,
    /// optimizer (adam|sgd), lr, beta1, beta2, eps, momentum, iterations,
    /// batch_size, seed, data_seed, data_size, data_path, peer, listen,
    /// connect_timeout_ms, bandwidth_bps, metrics_out, checkpoint_out,
    /// checkpoint_in.
    Train(Common),
    /// Replace one block's FFN down-projection by its truncated SVD and
    /// print the reconstruction error at every rank.
    ///
    /// Keys: model shape keys, seed, checkpoint_in, split_layer, rank,
    /// residual, checkpoint_out.
    Decompose(Common),
    /// Evaluate the analytic iteration-time model for local, split and
    /// split-decomposed training.
    ///
    /// Keys: t_edge_layer_ms, t_cloud_layer_ms, n_edge_layers,
    /// n_cloud_layers, t_naive_ms, t_comm_sl_ms, t_comm_sft_ms, batch,
    /// tokens, d_model, rank, bandwidth_bps.
    Estimate {
        #[command(flatten)]
        common: Common,
        /// Print a CSV of the split-decomposed total for ranks 1 to 64.
        #[arg(long)]
        sweep: bool,
    },
    /// Write a synthetic majority-count dataset as CSV.
    ///
    /// Keys: size, seed, out, vocab_size, seq_len, n_classes.
    Gendata(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// Configuration file of `key = value` lines.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Key overrides as `--key value` or `--key=value`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

impl Common {
    fn settings(&self) -> Result<Settings, commands::Failure> {
        Settings::from_sources(self.config.as_deref(), &self.overrides).map_err(commands::Failure::config)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SFT_LOG", "warn")).init();
    let result = match &cli.command {
        Command::Train(c) => c.settings().and_then(|s| commands::train(&s)),
        Command::Decompose(c) => c.settings().and_then(|s| commands::decompose(&s)),
        Command::Estimate { common, sweep } => common.settings().and_then(|s| commands::estimate(&s, *sweep)),
        Command::Gendata(c) => c.settings().and_then(|s| commands::gendata(&s)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        // A closed stdout, as in `sft estimate --sweep | head`, is not a failure.
        Err(f) if f.error.downcast_ref::<std::io::Error>().map(|e| e.kind()) == Some(std::io::ErrorKind::BrokenPipe) => {
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
