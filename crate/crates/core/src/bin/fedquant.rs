fn main() {
    std::process::exit(fedquant::cli::main_with_args(std::env::args_os()));
}
