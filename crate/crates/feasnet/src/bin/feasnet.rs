use clap::Parser;

fn main() {
    let cli = feasnet::cli::Cli::parse();
    std::process::exit(feasnet::cli::run_to_exit(&cli));
}
