fn main() {
    std::process::exit(icurisk_cli::main_with_args(std::env::args_os()));
}
