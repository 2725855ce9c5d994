fn main() -> std::process::ExitCode {
    mioflow::cli::main()
}
