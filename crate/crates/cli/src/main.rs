fn main() -> std::process::ExitCode {
    voltlab::cli::main()
}
