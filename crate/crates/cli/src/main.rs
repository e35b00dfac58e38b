use clap::Parser;

fn main() {
    let cli = rstd_cli::Cli::parse();
    if let Err(e) = rstd_cli::run(cli) {
        eprintln!("error: {e:#}");
        let usage = e.chain().any(|c| c.is::<rstd_cli::commands::UsageError>());
        std::process::exit(if usage { 2 } else { 1 });
    }
}
