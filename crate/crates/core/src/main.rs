mod cli;

use clap::Parser;

fn main() {
    let parsed = match cli::Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { cli::exit::USAGE } else { cli::exit::OK };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(err) = cli::run(parsed) {
        eprintln!("error: {err:#}");
        std::process::exit(cli::exit_code(&err));
    }
}
