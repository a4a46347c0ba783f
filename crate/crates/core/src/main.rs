fn main() {
    std::process::exit(etfc::cli::main_with_args(std::env::args_os()));
}
