fn main() {
    std::process::exit(temple_forge::cli::main_with_args(std::env::args_os()));
}
