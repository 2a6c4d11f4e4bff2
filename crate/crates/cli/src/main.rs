fn main() {
    std::process::exit(macrohydro_cli::main_with_args(std::env::args_os()));
}
