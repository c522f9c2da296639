fn main() {
    std::process::exit(igc::cli::main_with(std::env::args_os()));
}
