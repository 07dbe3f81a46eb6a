fn main() {
    std::process::exit(rldist::cli::main_with_args(std::env::args_os()));
}
