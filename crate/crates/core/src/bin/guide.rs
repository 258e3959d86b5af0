use clap::Parser;
use tracing_subscriber::EnvFilter;

fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_env("GUIDE_LOG").unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    let cli = guide::cli::Cli::parse();
    let code = guide::cli::run(cli, &mut std::io::stdout().lock());
    std::process::exit(code);
}
