fn main() {
    std::process::exit(resq::cli::run_from(std::env::args_os()));
}
