fn main() {
    std::process::exit(dmue::harness::cli::cli(std::env::args_os()));
}
