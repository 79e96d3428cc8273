fn main() {
    std::process::exit(amcr_core::cli::run(std::env::args_os()));
}
