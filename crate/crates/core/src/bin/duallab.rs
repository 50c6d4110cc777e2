fn main() {
    std::process::exit(duallab::cli::run_from_args(std::env::args_os()));
}
