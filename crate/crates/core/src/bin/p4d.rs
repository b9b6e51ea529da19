fn main() {
    std::process::exit(p4d_core::cli::main_with_args(std::env::args_os()));
}
