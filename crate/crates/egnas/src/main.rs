use clap::Parser;

fn main() {
    let cli = egnas::cli::Cli::parse();
    if let Err(e) = egnas::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
