use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(ntkt::cli::main_with(std::env::args_os()))
}
