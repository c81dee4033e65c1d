fn main() {
    std::process::exit(asvi::cli::main_with_args(std::env::args_os()));
}
