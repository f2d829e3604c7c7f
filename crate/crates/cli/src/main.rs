fn main() {
    std::process::exit(dsdf_cli::run(std::env::args_os()));
}
