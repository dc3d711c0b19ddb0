fn main() {
    std::process::exit(lcp_core::cli::run(std::env::args_os()));
}
