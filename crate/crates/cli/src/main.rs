fn main() {
    std::process::exit(protlm_cli::run_cli(std::env::args_os()));
}
