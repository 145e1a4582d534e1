fn main() {
    std::process::exit(bnn_cli::main_with_args(std::env::args_os()));
}
