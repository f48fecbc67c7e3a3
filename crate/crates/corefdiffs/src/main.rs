fn main() {
    std::process::exit(corefdiffs::cli::run(std::env::args_os()));
}
