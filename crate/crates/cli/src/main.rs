use clap::Parser;
use dq_cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("dq {}: {e}", cli.command.name());
        std::process::exit(e.exit_code());
    }
}
