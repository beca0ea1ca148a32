fn main() {
    polydich::cli::main();
}
