fn main() {
    std::process::exit(stosym::cli::main_with_args(std::env::args_os()));
}
