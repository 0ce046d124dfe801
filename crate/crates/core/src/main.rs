fn main() {
    std::process::exit(geosbi::cli::run_cli(std::env::args_os()));
}
