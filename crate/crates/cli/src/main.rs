fn main() -> std::process::ExitCode {
    stainseg::run(std::env::args_os())
}
