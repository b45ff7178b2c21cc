fn main() {
    std::process::exit(cdiffdet::cli::main());
}
