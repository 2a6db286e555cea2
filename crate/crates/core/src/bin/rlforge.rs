fn main() {
    std::process::exit(rlforge::cli::run_command(std::env::args_os()));
}
