fn main() {
    std::process::exit(gatevio_cli::cli_main(std::env::args_os()));
}
