fn main() -> std::process::ExitCode {
    esocialnav::cli::run(std::env::args_os())
}
