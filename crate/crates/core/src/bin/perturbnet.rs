use clap::Parser;

fn main() {
    let cli = perturbnet::cli::Cli::parse();
    std::process::exit(perturbnet::cli::run(cli));
}
