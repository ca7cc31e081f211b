fn main() {
    std::process::exit(tdoa_assoc::cli::main_with_args(std::env::args_os()));
}
