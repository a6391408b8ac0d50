fn main() {
    feddm::cli::init_logging();
    std::process::exit(feddm::cli::run_cli(std::env::args_os()));
}
