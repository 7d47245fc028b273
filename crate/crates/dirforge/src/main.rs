fn main() {
    std::process::exit(dirforge::cli::run(std::env::args_os()));
}
