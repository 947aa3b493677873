fn main() {
    std::process::exit(hdcbps_cli::main_with_args(std::env::args_os()));
}
