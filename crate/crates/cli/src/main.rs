use std::process::ExitCode;

fn main() -> ExitCode {
    let cli = match dmdp_cli::parse_cli(std::env::args_os()) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match dmdp_cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(dmdp_cli::exit_code(&e))
        }
    }
}
