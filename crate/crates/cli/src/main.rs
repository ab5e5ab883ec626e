use clap::Parser;
use panelmatch_cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
        }
        Err(e) => {
            eprintln!("{e}");
            std::process::exit(e.code.exit_status());
        }
    }
}
