fn main() {
    std::process::exit(unitmetric::cli::main());
}
