fn main() {
    std::process::exit(stgm::cli::run(std::env::args_os()));
}
