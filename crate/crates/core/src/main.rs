fn main() -> std::process::ExitCode {
    elisabot::cli::main()
}
