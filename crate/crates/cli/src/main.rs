use clap::Parser;

fn main() {
    let cli = gift_cli::Cli::parse();
    if let Err(e) = gift_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
