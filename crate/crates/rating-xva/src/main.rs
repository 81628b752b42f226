use clap::Parser;

fn main() {
    let cli = rating_xva::cli::Cli::parse();
    if let Err(e) = rating_xva::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
