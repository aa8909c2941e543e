fn main() {
    std::process::exit(crossstate_core::cli::run(std::env::args_os()));
}
