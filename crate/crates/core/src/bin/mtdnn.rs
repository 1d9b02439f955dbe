use std::process::ExitCode;

fn main() -> ExitCode {
    mtdnn::cli::main_with(std::env::args_os())
}
