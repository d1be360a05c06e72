use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(mfhinf::cli::dispatch(std::env::args_os()) as u8)
}
