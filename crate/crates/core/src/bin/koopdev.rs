fn main() {
    std::process::exit(koopman_deviation::cli::run(std::env::args_os()));
}
