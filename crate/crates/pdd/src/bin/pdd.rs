fn main() {
    std::process::exit(pdd::cli::run());
}
