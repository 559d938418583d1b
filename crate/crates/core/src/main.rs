fn main() {
    std::process::exit(fretal::cli::main_with_args(std::env::args_os()));
}
