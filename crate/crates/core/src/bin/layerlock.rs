fn main() {
    std::process::exit(layerlock::cli::main_with_args(std::env::args_os()));
}
