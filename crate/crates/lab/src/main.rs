fn main() {
    std::process::exit(decode_lab::cli::main());
}
