use clap::Parser;

fn main() {
    usg_cli::init_logging();
    let cli = usg_cli::Cli::parse();
    if let Err(e) = usg_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.code());
    }
}
