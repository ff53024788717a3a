fn main() -> std::process::ExitCode {
    promptpix::cli::run_from(std::env::args_os())
}
