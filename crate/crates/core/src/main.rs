fn main() {
    std::process::exit(spectrum_share::cli::main_with_args(std::env::args_os()));
}
