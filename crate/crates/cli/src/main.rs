fn main() {
    std::process::exit(groundloop_cli::main_with(std::env::args().collect()));
}
