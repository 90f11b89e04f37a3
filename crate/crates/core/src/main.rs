fn main() {
    std::process::exit(bleedscope::cli::main());
}
