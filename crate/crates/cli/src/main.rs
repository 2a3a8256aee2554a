fn main() {
    std::process::exit(refinery_cli::cli_run(std::env::args().collect()));
}
