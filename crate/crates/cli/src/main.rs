use std::process::ExitCode;

fn main() -> ExitCode {
    figura_cli::main_with(std::env::args_os())
}
