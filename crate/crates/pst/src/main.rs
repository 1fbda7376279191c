use clap::Parser;

fn main() {
    let cli = pst::cli::Cli::parse();
    if let Err(err) = pst::cli::run(cli) {
        eprintln!("error: {err}");
        std::process::exit(pst::cli::exit_code(&err));
    }
}
