fn main() {
    std::process::exit(qroute::cli::run(std::env::args_os()));
}
