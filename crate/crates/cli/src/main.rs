use std::process::ExitCode;

fn main() -> ExitCode {
    let verbosity = std::env::args().filter(|a| a == "-v" || a == "--verbose").count()
        + std::env::args().filter(|a| a == "-vv").count() * 2;
    let level = match verbosity {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match mode_dyn_cli::run(std::env::args_os()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
