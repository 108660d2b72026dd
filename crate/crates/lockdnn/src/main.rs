fn main() {
    std::process::exit(lockdnn::cli::main_with(std::env::args_os()));
}
