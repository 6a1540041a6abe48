use clap::Parser;

fn main() {
    let args = estinet::cli::Args::parse();
    std::process::exit(estinet::cli::run(args));
}
