fn main() -> std::process::ExitCode {
    lifecycle_sim::io::cli::main()
}
