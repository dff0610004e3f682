fn main() {
    std::process::exit(station_core::cli::main_with_args(std::env::args_os()));
}
