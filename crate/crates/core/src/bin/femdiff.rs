fn main() {
    std::process::exit(femdiff::cli::main_with_args(std::env::args_os()));
}
