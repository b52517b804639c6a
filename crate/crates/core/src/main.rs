fn main() {
    std::process::exit(tsr::cli::main_with_args(std::env::args_os()));
}
