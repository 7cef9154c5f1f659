fn main() {
    std::process::exit(refocus::cli::run(std::env::args_os()));
}
