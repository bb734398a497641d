fn main() {
    std::process::exit(photonstat::cli::run());
}
