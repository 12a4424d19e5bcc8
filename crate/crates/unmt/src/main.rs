fn main() {
    std::process::exit(unmt::cli::run());
}
