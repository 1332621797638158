fn main() {
    std::process::exit(hoi_cli::run(std::env::args_os()));
}
