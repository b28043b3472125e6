fn main() {
    std::process::exit(aod::cli::run(std::env::args_os()));
}
