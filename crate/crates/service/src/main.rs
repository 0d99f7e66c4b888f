fn main() -> std::process::ExitCode {
    dragnoise_service::cli::main()
}
