fn main() {
    std::process::exit(genppo::cli::run(std::env::args()));
}
