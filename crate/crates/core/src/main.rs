fn main() {
    std::process::exit(gseg::cli::main_with_args(std::env::args_os()));
}
