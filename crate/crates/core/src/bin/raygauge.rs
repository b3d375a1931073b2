fn main() {
    std::process::exit(raygauge::cli::main_with_args(std::env::args_os()));
}
