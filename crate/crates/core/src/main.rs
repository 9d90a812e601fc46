fn main() {
    std::process::exit(umrf_forge::cli::run(std::env::args_os()));
}
