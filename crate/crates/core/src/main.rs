use clap::Parser;
use gensdf::cli::{exit_code_for, run, Cli};

fn main() {
    env_logger::init();
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        std::process::exit(exit_code_for(&err));
    }
}
