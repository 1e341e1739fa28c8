fn main() {
    std::process::exit(disco_core::cli::run(std::env::args_os()));
}
