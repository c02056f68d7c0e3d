use clap::Parser;

fn main() {
    let cli = bubbleonet::cli::Cli::parse();
    if let Err(e) = bubbleonet::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
