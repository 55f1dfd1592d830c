fn main() {
    std::process::exit(pfp_core::cli::run(std::env::args_os()));
}
