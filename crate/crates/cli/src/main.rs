fn main() {
    std::process::exit(bridgeflow_cli::run(std::env::args_os()));
}
