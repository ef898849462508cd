use std::io::Write;

use clap::Parser;
use followup_cli::{run, Cli};
use tracing_subscriber::EnvFilter;

fn main() {
    // logs go to stderr so stdout stays greppable
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(out) => {
            let _ = std::io::stdout().write_all(&out);
        }
        Err(e) => {
            let line = e.to_string().replace('\n', " ");
            eprintln!("error: {line}");
            std::process::exit(e.exit_code());
        }
    }
}
