fn main() {
    std::process::exit(melbert::cli::run(std::env::args_os()));
}
