fn main() {
    std::process::exit(convformer::cli::run(std::env::args()));
}
