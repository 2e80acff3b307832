//! `metasched` binary: thin wrapper over [`metasched::harness::run_cli`].

use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(metasched::harness::run_cli(std::env::args_os()) as u8)
}
