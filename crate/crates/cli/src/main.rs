fn main() {
    std::process::exit(sand_cli::main_with_args(std::env::args_os()));
}
