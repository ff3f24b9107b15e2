fn main() {
    std::process::exit(diffnet::cli::main_with_args(std::env::args_os()));
}
