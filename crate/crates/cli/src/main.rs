use clap::Parser;
use mflab_cli::{init_threads, run, Cli};

fn main() {
    let cli = Cli::parse();
    init_threads(cli.threads);
    std::process::exit(run(&cli));
}
