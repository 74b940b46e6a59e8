fn main() {
    std::process::exit(smoothstate::cli::run(std::env::args()));
}
