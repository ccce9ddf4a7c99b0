fn main() {
    std::process::exit(croplandws::cli::main_with_args(std::env::args_os()));
}
