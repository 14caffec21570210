fn main() -> std::process::ExitCode {
    efh::cli::run_from(std::env::args_os())
}
