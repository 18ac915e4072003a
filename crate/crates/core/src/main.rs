fn main() {
    std::process::exit(netgrow::cli::run(std::env::args_os()));
}
