fn main() {
    std::process::exit(trajcast::cli::run_from_args(std::env::args_os()));
}
