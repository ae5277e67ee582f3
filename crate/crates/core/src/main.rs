fn main() {
    std::process::exit(recfg::cli::main_with_args(std::env::args_os()));
}
