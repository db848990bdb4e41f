fn main() {
    let code = feedkit_cli::run_cli(std::env::args().skip(1));
    std::process::exit(code);
}
