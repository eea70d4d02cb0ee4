fn main() {
    std::process::exit(suscept_cli::main_with(std::env::args_os()));
}
