fn main() {
    std::process::exit(varnet::cli::main_with_args(std::env::args_os()));
}
