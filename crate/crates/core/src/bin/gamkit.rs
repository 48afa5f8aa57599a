fn main() {
    std::process::exit(gamkit::cli::main_with_args(std::env::args_os()));
}
