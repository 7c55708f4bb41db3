fn main() -> std::process::ExitCode {
    protoglyph::cli::run(std::env::args_os())
}
