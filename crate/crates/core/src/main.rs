fn main() {
    std::process::exit(featgen::cli::run(std::env::args_os()));
}
