fn main() {
    std::process::exit(misspec::cli::main());
}
