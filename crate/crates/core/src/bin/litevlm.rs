fn main() {
    std::process::exit(litevlm::cli::main_with_args(std::env::args_os()));
}
