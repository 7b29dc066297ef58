fn main() {
    std::process::exit(roidet::cli::run(std::env::args_os()));
}
