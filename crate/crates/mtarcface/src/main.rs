fn main() {
    std::process::exit(mtarcface::cli::run(std::env::args()));
}
