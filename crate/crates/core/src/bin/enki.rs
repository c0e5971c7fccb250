fn main() {
    std::process::exit(enki::cli::main_from_args(std::env::args_os()));
}
