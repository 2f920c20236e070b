fn main() {
    std::process::exit(caac::cli::main_with(std::env::args_os()));
}
