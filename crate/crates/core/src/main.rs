fn main() {
    std::process::exit(fdnn_core::cli::main_with(std::env::args_os()));
}
