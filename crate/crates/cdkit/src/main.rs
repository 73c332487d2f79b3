use clap::Parser;

fn main() {
    // clap exits with 2 on bad arguments; here 2 is reserved for numerical
    // failures, so parse errors are routed to the user-error status.
    let cli = match cdkit::cli::Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(err) = cdkit::cli::run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(cdkit::cli::exit_code(&err));
    }
}
