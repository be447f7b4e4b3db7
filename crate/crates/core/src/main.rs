fn main() {
    std::process::exit(canids::cli::main());
}
