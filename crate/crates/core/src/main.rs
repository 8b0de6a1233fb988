fn main() {
    std::process::exit(ehiv::cli_io::run_cli(std::env::args_os()));
}
