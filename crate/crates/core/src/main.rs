fn main() {
    std::process::exit(mscincd::cli::cli_main(std::env::args_os()));
}
