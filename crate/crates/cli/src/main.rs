use clap::Parser;
use fuseseg_cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(report) => print!("{report}"),
        Err(e) => {
            eprintln!("fuseseg: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
