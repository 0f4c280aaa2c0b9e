fn main() {
    std::process::exit(entropic_cli::run(std::env::args_os()));
}
