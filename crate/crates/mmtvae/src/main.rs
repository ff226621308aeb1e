fn main() {
    std::process::exit(mmtvae::cli::run(std::env::args_os()));
}
