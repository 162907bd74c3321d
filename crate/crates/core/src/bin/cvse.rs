fn main() {
    std::process::exit(cvse::cli::run(std::env::args_os()));
}
