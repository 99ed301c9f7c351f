fn main() {
    std::process::exit(tokvla_cli::main_with(std::env::args_os()));
}
