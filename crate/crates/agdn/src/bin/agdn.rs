fn main() {
    std::process::exit(agdn::cli::run());
}
