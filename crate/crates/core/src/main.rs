fn main() {
    std::process::exit(ssvaer_core::cli::run());
}
