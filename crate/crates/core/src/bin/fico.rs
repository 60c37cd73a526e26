fn main() {
    std::process::exit(fico::harness::cli::main_with_args(std::env::args_os()));
}
