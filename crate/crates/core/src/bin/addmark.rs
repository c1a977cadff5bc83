fn main() {
    std::process::exit(addmark::cli::run(std::env::args_os()));
}
