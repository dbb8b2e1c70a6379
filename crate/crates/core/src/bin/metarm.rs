fn main() {
    std::process::exit(metarm::cli::main());
}
