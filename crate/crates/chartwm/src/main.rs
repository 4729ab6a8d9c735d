fn main() {
    std::process::exit(chartwm::cli::run_from_env())
}
