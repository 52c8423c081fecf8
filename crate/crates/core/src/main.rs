fn main() {
    std::process::exit(subq::harness::cli::run(std::env::args_os()));
}
