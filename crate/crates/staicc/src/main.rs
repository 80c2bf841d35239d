fn main() {
    std::process::exit(staicc::cli::main_with(std::env::args_os()));
}
