fn main() {
    std::process::exit(warpgen_cli::main_with(std::env::args_os()));
}
