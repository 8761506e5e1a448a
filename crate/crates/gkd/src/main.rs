fn main() {
    std::process::exit(gkd::cli::run(std::env::args_os()));
}
