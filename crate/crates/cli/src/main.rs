fn main() {
    std::process::exit(scan_cli::run(std::env::args_os()));
}
