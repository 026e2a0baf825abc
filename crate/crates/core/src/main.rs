use std::process::ExitCode;

fn main() -> ExitCode {
    dropoutlab::cli::main()
}
