fn main() {
    std::process::exit(warmstart::cli::main_with_args(std::env::args_os()));
}
