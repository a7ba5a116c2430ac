fn main() -> std::process::ExitCode {
    drpo_cli::main_with(std::env::args_os())
}
