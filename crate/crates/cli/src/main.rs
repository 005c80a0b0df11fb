fn main() {
    std::process::exit(dipl_cli::run_cli(std::env::args_os()));
}
