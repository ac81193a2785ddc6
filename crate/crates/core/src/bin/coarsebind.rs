use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(coarsebind::cli::run_from(std::env::args_os()))
}
