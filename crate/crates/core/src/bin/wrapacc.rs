fn main() -> std::process::ExitCode {
    wrapacc::cli::main()
}
