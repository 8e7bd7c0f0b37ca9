use std::process::ExitCode;

fn main() -> ExitCode {
    foregan::cli::main_with_args(std::env::args().collect())
}
