use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(resadapt_cli::run(std::env::args_os()))
}
