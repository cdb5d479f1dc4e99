use clap::Parser;

fn main() {
    std::process::exit(impham_cli::run(impham_cli::Cli::parse()));
}
