fn main() {
    std::process::exit(dapfsr::cli::run(std::env::args_os()));
}
