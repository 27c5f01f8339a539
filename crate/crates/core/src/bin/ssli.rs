fn main() {
    std::process::exit(ssl_influence::cli::main_with_args(std::env::args_os()));
}
