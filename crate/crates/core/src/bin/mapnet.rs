fn main() {
    std::process::exit(mapnet::cli::main_with_args(std::env::args_os()));
}
