use clap::Parser;

fn main() {
    let cli = imp::cli::Cli::parse();
    if let Err(e) = imp::cli::dispatch(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
