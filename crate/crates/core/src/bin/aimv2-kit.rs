use std::process::ExitCode;

fn main() -> ExitCode {
    let result = aimv2_kit::cli::run_cli(std::env::args_os());
    if result.exit_code == 0 {
        println!("{}", result.summary);
    } else {
        eprintln!("{}", result.summary);
    }
    ExitCode::from(result.exit_code as u8)
}
