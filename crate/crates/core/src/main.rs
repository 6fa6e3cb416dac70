use clap::Parser;
use phqfair::cli::{self, Cli};

fn main() {
    let args = Cli::parse();
    if let Err(e) = cli::run(args) {
        eprintln!("error: {e}");
        std::process::exit(cli::exit_code(&e));
    }
}
