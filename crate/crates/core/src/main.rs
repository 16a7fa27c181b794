fn main() {
    std::process::exit(nslab_core::cli::main_with_args(std::env::args_os()));
}
