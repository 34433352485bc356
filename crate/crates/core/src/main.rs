fn main() {
    std::process::exit(rchc::cli::main_exit_code(std::env::args_os()));
}
