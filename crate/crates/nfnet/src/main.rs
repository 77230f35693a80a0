fn main() {
    std::process::exit(nfnet::cli::run(std::env::args()));
}
