use clap::Parser;
use pincer::cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    let stdout = std::io::stdout();
    if let Err(e) = run(&cli, &mut stdout.lock()) {
        let cat = match e.category() {
            pincer_core::ErrorCategory::Config => "config",
            pincer_core::ErrorCategory::Data => "data",
            pincer_core::ErrorCategory::State => "state",
            pincer_core::ErrorCategory::Numeric => "numeric",
        };
        eprintln!("error ({cat}): {e}");
        std::process::exit(e.exit_code());
    }
}
