fn main() -> std::process::ExitCode {
    ar2diff::cli::main()
}
