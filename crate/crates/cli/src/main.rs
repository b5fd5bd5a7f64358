fn main() {
    std::process::exit(ndkf_cli::run_cli(std::env::args_os()));
}
