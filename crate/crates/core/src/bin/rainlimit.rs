fn main() {
    std::process::exit(rainlimit::cli::main_with_args(std::env::args_os()));
}
