use clap::Parser;

fn main() {
    let cli = denoiserank_cli::Cli::parse();
    if let Err(e) = denoiserank_cli::run(cli) {
        eprintln!("error: {e}");
        let mut source = std::error::Error::source(&e);
        while let Some(s) = source {
            eprintln!("  caused by: {s}");
            source = s.source();
        }
        std::process::exit(e.exit_code());
    }
}
