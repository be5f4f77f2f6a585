//! Experiment commands and the session service behind the `usg` binary.

pub mod commands;
pub mod error;
pub mod manifest;
pub mod service;

pub use commands::{Cli, Command};
pub use error::CliError;
pub use manifest::RunManifest;

/// Installs a stderr logger whose filter comes from `USG_LOG` (default `info`).
pub fn init_logging() {
    let filter = tracing_subscriber::EnvFilter::try_from_env("USG_LOG")
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .with_ansi(std::io::IsTerminal::is_terminal(&std::io::stderr()))
        .try_init();
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(a) => commands::gen_data(&a).map(drop),
        Command::Train(a) => commands::train(&a).map(drop),
        Command::Ablate(a) => commands::ablate_cmd(&a).map(drop),
        Command::Guide(a) => commands::guide(&a).map(drop),
        Command::Serve(a) => commands::serve(&a),
    }
}
