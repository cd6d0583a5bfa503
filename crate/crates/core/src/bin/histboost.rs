fn main() -> std::process::ExitCode {
    histboost::cli::main()
}
